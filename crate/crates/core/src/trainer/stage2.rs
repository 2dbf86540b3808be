//! Stage 2: train a fusion network on frozen utterance features, one batch
//! of padded conversations per step, keeping the best dev weighted-F1 state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{Objective, RunConfig};
use super::log::{LogRecord, TrainingLog};
use crate::autodiff::Graph;
use crate::datamodel::{Conversation, FeatureStore, LabelSpace, Modality, Split};
use crate::error::{Error, Result};
use crate::evalbench::{compute_metrics, MetricReport};
use crate::magt::{
    ce_only_objective, pad_batch, stage2_objective, ConcatModel, FusionNet, MagtModel,
    SequenceBatch, Stage2Weights,
};
use crate::nn::RunMode;
use crate::optim::{Adam, OptimConfig};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Per-split conversation sequences, in manifest order.
#[derive(Clone, Debug)]
pub struct Stage2Data<T> {
    pub train: Vec<SequenceBatch<T>>,
    pub dev: Vec<SequenceBatch<T>>,
    pub test: Vec<SequenceBatch<T>>,
}

impl<T: Scalar> Stage2Data<T> {
    /// `stores` in text, audio, video order.
    pub fn new(convs: &[Conversation], stores: [&FeatureStore; 3]) -> Result<Self> {
        for (m, s) in Modality::ALL.into_iter().zip(stores) {
            if s.modality() != m {
                return Err(Error::Input(format!(
                    "{m} slot holds {} features",
                    s.modality()
                )));
            }
        }
        let mut data = Self {
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for conv in convs {
            let seq = SequenceBatch::from_conversation(conv, stores)?;
            data.split_mut(conv.split()).push(seq);
        }
        Ok(data)
    }

    pub fn split(&self, s: Split) -> &[SequenceBatch<T>] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<SequenceBatch<T>> {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }
}

/// Losses of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_total: f64,
    pub l_ce: f64,
    pub l_kd_a: Option<f64>,
    pub l_kd_v: Option<f64>,
}

/// Loop settings shared by every fusion model.
#[derive(Clone, Debug)]
pub struct FusionSettings {
    pub name: String,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch: usize,
    pub epochs: usize,
    pub objective: Objective,
    pub weights: Stage2Weights,
    pub optim: OptimConfig,
}

impl FusionSettings {
    pub fn from_config(cfg: &RunConfig, name: &str) -> Self {
        let s2 = &cfg.stage2;
        Self {
            name: name.into(),
            seed: cfg.seed,
            learning_rate: s2.learning_rate,
            batch: s2.batch,
            epochs: s2.epochs,
            objective: s2.objective,
            weights: Stage2Weights {
                alpha: s2.alpha,
                beta: s2.beta,
                tau: cfg.tau,
            },
            optim: s2.optim.clone(),
        }
    }
}

pub struct FusionRun<T> {
    /// Parameters at the best dev weighted-F1 epoch (the last epoch when
    /// there is no dev split).
    pub best: ParamSet<T>,
    pub last: ParamSet<T>,
    pub best_epoch: usize,
    pub best_dev: Option<MetricReport>,
    pub log: TrainingLog,
    pub steps: Vec<StepRecord>,
}

#[derive(Default)]
struct Tally {
    total: f64,
    ce: f64,
    kd_a: Option<f64>,
    kd_v: Option<f64>,
    batches: usize,
    predictions: Vec<usize>,
    labels: Vec<usize>,
}

fn add_opt(slot: &mut Option<f64>, v: Option<f64>) {
    if let Some(v) = v {
        *slot = Some(slot.unwrap_or(0.0) + v);
    }
}

/// Runs the objective on one padded batch; returns the step losses and, in
/// training, the gradients.
fn batch_step<T: Scalar, N: FusionNet>(
    params: &ParamSet<T>,
    net: &N,
    batch: &[SequenceBatch<T>],
    s: &FusionSettings,
    mode: &mut RunMode<'_>,
    tally: &mut Tally,
) -> Result<(StepRecord, Option<crate::autodiff::Gradients<T>>)> {
    let padded = pad_batch(batch);
    let mut g = Graph::with_params(params);
    let terms = match s.objective {
        Objective::Full => stage2_objective(&mut g, net, &padded, &s.weights, mode)?,
        Objective::CeOnly => ce_only_objective(&mut g, net, &padded, mode)?,
    };
    let val = |g: &Graph<'_, T>, n| g.scalar(n).to_f64_lossy();
    let pair = |g: &Graph<'_, T>, t: Option<(_, _)>| t.map(|(ls, lf)| val(g, ls) + val(g, lf));
    let rec = StepRecord {
        epoch: 0,
        step: 0,
        l_total: val(&g, terms.total),
        l_ce: val(&g, terms.ce),
        l_kd_a: pair(&g, terms.kd_audio),
        l_kd_v: pair(&g, terms.kd_video),
    };
    tally.total += rec.l_total;
    tally.ce += rec.l_ce;
    add_opt(&mut tally.kd_a, rec.l_kd_a);
    add_opt(&mut tally.kd_v, rec.l_kd_v);
    tally.batches += 1;
    tally
        .predictions
        .extend(g.value(terms.logits).argmax_rows());
    tally.labels.extend(terms.labels.iter().copied());
    let grads = if mode.is_train() && rec.l_total.is_finite() {
        Some(g.backward(terms.total)?)
    } else {
        None
    };
    Ok((rec, grads))
}

impl Tally {
    fn record(
        &self,
        name: &str,
        epoch: usize,
        split: Split,
        space: &LabelSpace,
    ) -> Result<(LogRecord, MetricReport)> {
        let n = self.batches.max(1) as f64;
        let report = compute_metrics(&self.predictions, &self.labels, space)?;
        let rec = LogRecord {
            stage: 2,
            branch: name.into(),
            epoch,
            split: split.as_str().into(),
            l_total: self.total / n,
            l_ce: self.ce / n,
            l_s: None,
            l_f: None,
            l_kd_a: self.kd_a.map(|v| v / n),
            l_kd_v: self.kd_v.map(|v| v / n),
            accuracy: report.accuracy,
            weighted_f1: report.weighted_f1,
        };
        Ok((rec, report))
    }
}

/// Eval-mode pass over `split` in batches; returns metrics and mean losses.
pub fn evaluate_fusion<T: Scalar, N: FusionNet>(
    params: &ParamSet<T>,
    net: &N,
    seqs: &[SequenceBatch<T>],
    s: &FusionSettings,
    space: &LabelSpace,
    epoch: usize,
    split: Split,
) -> Result<(LogRecord, MetricReport)> {
    let mut tally = Tally::default();
    for chunk in seqs.chunks(s.batch.max(1)) {
        batch_step(params, net, chunk, s, &mut RunMode::Eval, &mut tally)?;
    }
    tally.record(&s.name, epoch, split, space)
}

/// Eval-mode predictions and labels over real utterances, in order.
pub fn predict_fusion<T: Scalar, N: FusionNet>(
    params: &ParamSet<T>,
    net: &N,
    seqs: &[SequenceBatch<T>],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for seq in seqs {
        let mut g = Graph::with_params(params);
        let out = net.forward_sequence(&mut g, seq, &mut RunMode::Eval)?;
        let real = seq.real_positions();
        let logits = g.value(out.logits).select_rows(&real);
        preds.extend(logits.softmax_rows().argmax_rows());
        labels.extend(real.iter().map(|&i| seq.labels[i]));
    }
    Ok((preds, labels))
}

/// The stage-2 loop for any [`FusionNet`]: Adam over shuffled conversation
/// batches, one train and one dev record per epoch.
pub fn train_fusion<T: Scalar, N: FusionNet>(
    mut params: ParamSet<T>,
    net: &N,
    data: &Stage2Data<T>,
    s: &FusionSettings,
    space: &LabelSpace,
) -> Result<FusionRun<T>> {
    if data.train.is_empty() {
        return Err(Error::Dataset(
            "stage 2 has no training conversations".into(),
        ));
    }
    let batch = s.batch.max(1);
    let per_epoch = data.train.len().div_ceil(batch);
    let mut adam = Adam::new(
        &params,
        s.learning_rate,
        s.optim.clone(),
        per_epoch * s.epochs,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = TrainingLog::default();
    let mut steps = Vec::new();
    let mut best = (params.clone(), 0usize, None::<MetricReport>);
    for epoch in 1..=s.epochs {
        order.shuffle(&mut rng);
        let mut tally = Tally::default();
        for (i, idx) in order.chunks(batch).enumerate() {
            let seqs: Vec<SequenceBatch<T>> = idx.iter().map(|&k| data.train[k].clone()).collect();
            let (mut rec, grads) = batch_step(
                &params,
                net,
                &seqs,
                s,
                &mut RunMode::Train(&mut rng),
                &mut tally,
            )?;
            rec.epoch = epoch;
            rec.step = i + 1;
            if !rec.l_total.is_finite() {
                return Err(Error::Divergence(format!(
                    "{} epoch {epoch}, step {}: loss {}",
                    s.name, rec.step, rec.l_total
                )));
            }
            steps.push(rec);
            let grads = grads.expect("train mode with a finite loss");
            adam.step(&mut params, grads.params());
            if !params.is_finite() {
                return Err(Error::Divergence(format!(
                    "{} epoch {epoch}, step {}: non-finite parameters",
                    s.name,
                    i + 1
                )));
            }
        }
        log.push(tally.record(&s.name, epoch, Split::Train, space)?.0);
        if data.dev.is_empty() {
            best = (params.clone(), epoch, None);
            continue;
        }
        let (rec, report) = evaluate_fusion(&params, net, &data.dev, s, space, epoch, Split::Dev)?;
        log.push(rec);
        let improved = best
            .2
            .as_ref()
            .is_none_or(|b| report.weighted_f1 > b.weighted_f1);
        if improved {
            best = (params.clone(), epoch, Some(report));
        }
    }
    Ok(FusionRun {
        best: best.0,
        last: params,
        best_epoch: best.1,
        best_dev: best.2,
        log,
        steps,
    })
}

pub struct Stage2Output<T> {
    /// Best dev weighted-F1 checkpoint.
    pub model: MagtModel<T>,
    pub run: FusionRun<T>,
}

/// Trains MAGT on the three stores (text, audio, video slots).
pub fn train_stage2<T: Scalar>(
    cfg: &RunConfig,
    convs: &[Conversation],
    stores: [&FeatureStore; 3],
) -> Result<Stage2Output<T>> {
    cfg.validate()?;
    let data = Stage2Data::new(convs, stores)?;
    train_stage2_on(cfg, &data)
}

pub fn train_stage2_on<T: Scalar>(
    cfg: &RunConfig,
    data: &Stage2Data<T>,
) -> Result<Stage2Output<T>> {
    let mut model = MagtModel::<T>::new(cfg.magt_config(), cfg.seed)?;
    let settings = FusionSettings::from_config(cfg, "MAGT");
    let params = std::mem::take(&mut model.params);
    let run = train_fusion(
        params,
        &model.fusion(),
        data,
        &settings,
        &cfg.dataset.label_space,
    )?;
    model.params = run.best.clone();
    Ok(Stage2Output { model, run })
}

pub struct ConcatOutput<T> {
    pub model: ConcatModel<T>,
    pub run: FusionRun<T>,
}

/// Trains the concatenation baseline with cross-entropy only.
pub fn train_concat_on<T: Scalar>(
    cfg: &RunConfig,
    data: &Stage2Data<T>,
) -> Result<ConcatOutput<T>> {
    let mut model = ConcatModel::<T>::new(cfg.concat_config(), cfg.seed)?;
    let mut settings = FusionSettings::from_config(cfg, "Concat");
    settings.objective = Objective::CeOnly;
    let params = std::mem::take(&mut model.params);
    let run = train_fusion(
        params,
        &model.net,
        data,
        &settings,
        &cfg.dataset.label_space,
    )?;
    model.params = run.best.clone();
    Ok(ConcatOutput { model, run })
}
