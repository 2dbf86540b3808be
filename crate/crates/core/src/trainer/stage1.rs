//! Stage 1: train the text teacher with cross-entropy, freeze it, then train
//! audio and video branches with and without distillation from it.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BranchName, RunConfig, TextEncoderKind};
use super::log::{LogRecord, TrainingLog};
use crate::autodiff::Graph;
use crate::datamodel::{Conversation, FeatureStore, LabelSpace, Modality, Provenance, Split};
use crate::distill::{cross_entropy_node, feature_loss_node, soft_label_loss_node};
use crate::encoders::{
    build_prompt, Branch, EncoderInput, HashVocab, ModalityEncoder, PromptedInput, SpeakerNames,
};
use crate::error::{Error, Result};
use crate::evalbench::compute_metrics;
use crate::nn::RunMode;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Inference chunk size; keeps graphs small for the toy text encoder.
const INFER_CHUNK: usize = 64;

/// Every utterance of the corpus in manifest order, with its encoder inputs.
pub struct Stage1Data<'a> {
    ids: Vec<&'a str>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    stores: [&'a FeatureStore; 3],
    prompts: Option<Vec<PromptedInput>>,
}

impl<'a> Stage1Data<'a> {
    /// `stores` are the raw per-modality inputs (text, audio, video). With the
    /// toy text encoder the text input is the prompt built from each utterance.
    pub fn new(
        cfg: &RunConfig,
        convs: &'a [Conversation],
        stores: [&'a FeatureStore; 3],
    ) -> Result<Self> {
        for (m, s) in Modality::ALL.into_iter().zip(stores) {
            if s.modality() != m {
                return Err(Error::Input(format!(
                    "store for {m} holds {} features",
                    s.modality()
                )));
            }
            if s.dimension() != cfg.stage1.dimension {
                return Err(Error::Validation(format!(
                    "{m} inputs have width {}, stage1.dimension is {}",
                    s.dimension(),
                    cfg.stage1.dimension
                )));
            }
        }
        let mut data = Self {
            ids: Vec::new(),
            labels: Vec::new(),
            splits: Vec::new(),
            stores,
            prompts: None,
        };
        let toy = cfg.text.encoder == TextEncoderKind::Toy;
        let mut prompts = Vec::new();
        let names = SpeakerNames::default();
        let prompt_cfg = cfg.text.prompt();
        for conv in convs {
            for (k, u) in conv.utterances().iter().enumerate() {
                for (m, s) in Modality::ALL.into_iter().zip(stores) {
                    if !(toy && m == Modality::Text) && s.get(&u.utterance_id).is_none() {
                        return Err(Error::Dataset(format!(
                            "utterance {} has no {m} features",
                            u.utterance_id
                        )));
                    }
                }
                if toy {
                    prompts.push(build_prompt(conv, k + 1, &names, &prompt_cfg)?);
                }
                data.ids.push(&u.utterance_id);
                data.labels.push(u.label.id);
                data.splits.push(conv.split());
            }
        }
        if toy {
            data.prompts = Some(prompts);
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    fn inputs(&self, m: Modality, idx: &[usize]) -> Vec<EncoderInput<'_>> {
        idx.iter()
            .map(|&i| match (&self.prompts, m) {
                (Some(p), Modality::Text) => EncoderInput::Prompt(&p[i]),
                _ => EncoderInput::Vector(
                    self.stores[m.tag() as usize]
                        .get(self.ids[i])
                        .expect("checked in new"),
                ),
            })
            .collect()
    }

    fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// Consecutive chunks of `batch`; a trailing chunk of one is folded into the
/// previous chunk, since the batch-level losses need two rows.
pub fn batch_chunks(idx: &[usize], batch: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        let last = chunks.pop().expect("non-empty");
        chunks.last_mut().expect("non-empty").extend(last);
    }
    chunks
}

/// Frozen teacher outputs for every utterance, row-aligned with [`Stage1Data`].
struct TeacherOutputs<T> {
    features: Mat<T>,
    logits: Mat<T>,
}

pub struct Stage1Output<T> {
    pub branches: BTreeMap<BranchName, Branch<T>>,
    /// Features of every utterance in manifest order, per branch.
    pub stores: BTreeMap<BranchName, FeatureStore>,
    pub log: TrainingLog,
    /// Teacher parameter digests taken before and after student training.
    pub teacher_digest: (String, String),
}

impl<T: Scalar> Stage1Output<T> {
    pub fn store(&self, b: BranchName) -> &FeatureStore {
        &self.stores[&b]
    }
}

/// Builds the untrained layout of one branch. A branch and its distilled
/// twin start from identical parameters.
pub fn build_branch<T: Scalar>(cfg: &RunConfig, name: BranchName) -> Result<Branch<T>> {
    let mut rng = branch_rng(cfg.seed, name, 0);
    let d = cfg.stage1.dimension;
    let c = cfg.dataset.label_space.len();
    match (name, cfg.text.encoder) {
        (BranchName::T, TextEncoderKind::Toy) => Branch::toy_text(
            d,
            c,
            HashVocab {
                size: cfg.text.vocab_size,
                mask_token: cfg.text.mask_token.clone(),
                sep_token: cfg.text.sep_token.clone(),
            },
            cfg.text.layers,
            &cfg.model.block,
            &mut rng,
        ),
        _ => Ok(Branch::projection(name.modality(), d, c, &mut rng)),
    }
}

/// Stream 0 initialises, stream 1 shuffles and drops out. Distilled twins share
/// the stream of their plain branch.
fn branch_rng(seed: u64, name: BranchName, purpose: u64) -> ChaCha8Rng {
    let slot = match name {
        BranchName::T => 0,
        BranchName::A | BranchName::AKd => 1,
        BranchName::V | BranchName::VKd => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slot * 2 + purpose);
    rng
}

pub fn train_stage1<T: Scalar>(
    cfg: &RunConfig,
    convs: &[Conversation],
    inputs: [&FeatureStore; 3],
) -> Result<Stage1Output<T>> {
    cfg.validate()?;
    let data = Stage1Data::new(cfg, convs, inputs)?;
    if data.indices(Split::Train).len() < 2 {
        return Err(Error::Dataset(
            "stage 1 needs at least two training utterances".into(),
        ));
    }
    let mut log = TrainingLog::default();
    let mut branches = BTreeMap::new();

    let mut teacher = build_branch::<T>(cfg, BranchName::T)?;
    train_branch(cfg, &data, BranchName::T, &mut teacher, None, &mut log)?;
    let (features, logits) = infer_all(&teacher, &data)?;
    let frozen = TeacherOutputs { features, logits };
    let before = teacher.params.digest();

    for name in [
        BranchName::A,
        BranchName::AKd,
        BranchName::V,
        BranchName::VKd,
    ] {
        let mut student = build_branch::<T>(cfg, name)?;
        let guide = name.distilled().then_some(&frozen);
        train_branch(cfg, &data, name, &mut student, guide, &mut log)?;
        branches.insert(name, student);
    }
    let after = teacher.params.digest();
    branches.insert(BranchName::T, teacher);

    let hash = cfg.hash();
    let mut stores = BTreeMap::new();
    for (&name, branch) in &branches {
        let (features, _) = infer_all(branch, &data)?;
        stores.insert(name, to_store(name, branch, &data, &features, &hash)?);
    }
    Ok(Stage1Output {
        branches,
        stores,
        log,
        teacher_digest: (before, after),
    })
}

fn to_store<T: Scalar>(
    name: BranchName,
    branch: &Branch<T>,
    data: &Stage1Data<'_>,
    features: &Mat<T>,
    config_hash: &str,
) -> Result<FeatureStore> {
    let provenance = Provenance {
        encoder: format!("{name}:{}", branch.encoder.provenance()),
        config_hash: config_hash.to_string(),
    };
    let mut store = FeatureStore::new(name.modality(), features.cols(), provenance);
    for (i, id) in data.ids.iter().enumerate() {
        store.insert(
            *id,
            features
                .row(i)
                .iter()
                .map(|v| v.to_f64_lossy() as f32)
                .collect(),
        )?;
    }
    Ok(store)
}

/// Eval-mode features and logits of every utterance.
fn infer_all<T: Scalar>(branch: &Branch<T>, data: &Stage1Data<'_>) -> Result<(Mat<T>, Mat<T>)> {
    let m = branch.modality();
    let all: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(data.len());
    let mut logits = Vec::with_capacity(data.len());
    for chunk in all.chunks(INFER_CHUNK) {
        let (f, l) = branch.infer(&data.inputs(m, chunk))?;
        for r in 0..f.rows() {
            feats.push(f.row(r).to_vec());
            logits.push(l.row(r).to_vec());
        }
    }
    Ok((Mat::from_rows(&feats)?, Mat::from_rows(&logits)?))
}

#[derive(Default)]
struct EpochTally {
    total: f64,
    ce: f64,
    ls: f64,
    lf: f64,
    batches: usize,
    predictions: Vec<usize>,
    labels: Vec<usize>,
}

impl EpochTally {
    fn record(
        &self,
        name: BranchName,
        epoch: usize,
        split: Split,
        space: &LabelSpace,
        distilled: bool,
    ) -> Result<LogRecord> {
        let n = self.batches.max(1) as f64;
        let report = compute_metrics(&self.predictions, &self.labels, space)?;
        Ok(LogRecord {
            stage: 1,
            branch: name.as_str().into(),
            epoch,
            split: split.as_str().into(),
            l_total: self.total / n,
            l_ce: self.ce / n,
            l_s: distilled.then_some(self.ls / n),
            l_f: distilled.then_some(self.lf / n),
            l_kd_a: None,
            l_kd_v: None,
            accuracy: report.accuracy,
            weighted_f1: report.weighted_f1,
        })
    }
}

/// One pass over `idx` in chunks. Updates parameters when `opt` is given.
#[allow(clippy::too_many_arguments)]
fn run_pass<T: Scalar>(
    cfg: &RunConfig,
    data: &Stage1Data<'_>,
    name: BranchName,
    branch: &mut Branch<T>,
    teacher: Option<&TeacherOutputs<T>>,
    chunks: &[Vec<usize>],
    mut opt: Option<(&mut Adam<T>, &mut ChaCha8Rng)>,
    epoch: usize,
) -> Result<EpochTally> {
    let m = branch.modality();
    let mut tally = EpochTally::default();
    for (step, idx) in chunks.iter().enumerate() {
        let inputs = data.inputs(m, idx);
        let labels = data.labels_of(idx);
        let grads = {
            let mut g = Graph::with_params(&branch.params);
            let mut mode = match opt.as_mut() {
                Some((_, rng)) => RunMode::Train(rng),
                None => RunMode::Eval,
            };
            let feats = branch.encoder.forward(&mut g, &inputs, &mut mode)?;
            let logits = branch.head.forward(&mut g, feats)?;
            let ce = cross_entropy_node(&mut g, logits, &labels)?;
            let mut total = ce;
            let (mut ls_v, mut lf_v) = (0.0, 0.0);
            if let Some(t) = teacher {
                let tl = g.constant(t.logits.select_rows(idx));
                let tf = g.constant(t.features.select_rows(idx));
                let ls = soft_label_loss_node(&mut g, tl, logits, cfg.tau)?;
                let lf = feature_loss_node(&mut g, tf, feats, cfg.tau)?;
                total = g.add(total, ls)?;
                total = g.add(total, lf)?;
                ls_v = g.scalar(ls).to_f64_lossy();
                lf_v = g.scalar(lf).to_f64_lossy();
            }
            let total_v = g.scalar(total).to_f64_lossy();
            if !total_v.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage 1 branch {name}, epoch {epoch}, step {}: loss {total_v}",
                    step + 1
                )));
            }
            tally.total += total_v;
            tally.ce += g.scalar(ce).to_f64_lossy();
            tally.ls += ls_v;
            tally.lf += lf_v;
            tally.batches += 1;
            tally.predictions.extend(g.value(logits).argmax_rows());
            tally.labels.extend(labels);
            if opt.is_some() {
                Some(g.backward(total)?)
            } else {
                None
            }
        };
        if let (Some(grads), Some((adam, _))) = (grads, opt.as_mut()) {
            adam.step(&mut branch.params, grads.params());
            if !branch.params.is_finite() {
                return Err(Error::Divergence(format!(
                    "stage 1 branch {name}, epoch {epoch}, step {}: non-finite parameters",
                    step + 1
                )));
            }
        }
    }
    Ok(tally)
}

fn train_branch<T: Scalar>(
    cfg: &RunConfig,
    data: &Stage1Data<'_>,
    name: BranchName,
    branch: &mut Branch<T>,
    teacher: Option<&TeacherOutputs<T>>,
    log: &mut TrainingLog,
) -> Result<()> {
    let s1 = &cfg.stage1;
    let space = &cfg.dataset.label_space;
    let mut train = data.indices(Split::Train);
    let dev = data.indices(Split::Dev);
    let dev_chunks = batch_chunks(&dev, s1.batch);
    let per_epoch = batch_chunks(&train, s1.batch).len();
    let mut adam = Adam::new(
        &branch.params,
        s1.learning_rate,
        s1.optim.clone(),
        per_epoch * s1.epochs,
    );
    let mut rng = branch_rng(cfg.seed, name, 1);
    for epoch in 1..=s1.epochs {
        train.shuffle(&mut rng);
        let chunks = batch_chunks(&train, s1.batch);
        let tally = run_pass(
            cfg,
            data,
            name,
            branch,
            teacher,
            &chunks,
            Some((&mut adam, &mut rng)),
            epoch,
        )?;
        log.push(tally.record(name, epoch, Split::Train, space, teacher.is_some())?);
        if !dev.is_empty() {
            let tally = run_pass(cfg, data, name, branch, teacher, &dev_chunks, None, epoch)?;
            log.push(tally.record(name, epoch, Split::Dev, space, teacher.is_some())?);
        }
    }
    Ok(())
}
