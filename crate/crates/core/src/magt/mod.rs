//! Conversation-level fusion: the anchor-gated transformer and the
//! concatenation baseline.
//!
//! Every utterance stream is `H_m = F_m + PE + SE`. Step 1 enriches audio and
//! video with gated cross-modal streams, step 2 lets text attend to the
//! enriched streams:
//!
//! ```text
//! A_enr = H_{a→a} + g(H_{t→a}) + g(H_{v→a})
//! V_enr = H_{v→v} + g(H_{t→v}) + g(H_{a→v})
//! t′    = H_{t→t} + g(T(H_t, A_enr)) + g(T(H_t, V_enr))
//! ```

mod concat;
mod embedding;
mod objective;

pub use concat::{concat_forward, ConcatConfig, ConcatModel, ConcatNet};
pub use embedding::{positional_embedding, speaker_embedding, speaker_embedding_node};
pub use objective::{ce_only_objective, stage2_objective, Stage2Terms, Stage2Weights};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId};
use crate::datamodel::{Conversation, FeatureStore, Modality};
use crate::encoders::{head_logits, ModalityHead};
use crate::error::{Error, Result};
use crate::nn::{Attended, BlockConfig, Linear, RunMode, TransformerBlock};
use crate::params::{read_checkpoint, write_checkpoint, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// One conversation's three feature sequences, possibly padded.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T> {
    pub conversation_id: String,
    /// Text, audio, video, each `U × d`.
    pub features: [Mat<T>; 3],
    pub speaker_ids: Vec<u32>,
    /// `true` marks a padded position.
    pub pad_mask: Vec<bool>,
    /// Class ids; entries at padded positions are ignored.
    pub labels: Vec<usize>,
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn new(
        conversation_id: impl Into<String>,
        features: [Mat<T>; 3],
        speaker_ids: Vec<u32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let u = speaker_ids.len();
        let b = Self {
            conversation_id: conversation_id.into(),
            features,
            pad_mask: vec![false; u],
            speaker_ids,
            labels,
        };
        b.validate()?;
        Ok(b)
    }

    /// Looks up the three feature sequences of `conv`.
    pub fn from_conversation(conv: &Conversation, stores: [&FeatureStore; 3]) -> Result<Self> {
        let ids: Vec<&str> = conv
            .utterances()
            .iter()
            .map(|u| u.utterance_id.as_str())
            .collect();
        let mut feats = Vec::with_capacity(3);
        for store in stores {
            feats.push(store.matrix::<T>(&ids)?);
        }
        let features: [Mat<T>; 3] = feats.try_into().expect("three stores");
        Self::new(conv.id(), features, conv.speakers(), conv.labels())
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.speaker_ids.len();
        if u == 0 {
            return Err(Error::Input(format!(
                "conversation {} is empty",
                self.conversation_id
            )));
        }
        let d = self.features[0].cols();
        for f in &self.features {
            if f.shape() != (u, d) {
                return Err(Error::shape(
                    "SequenceBatch",
                    format!("feature {:?} for {u} utterances of width {d}", f.shape()),
                ));
            }
        }
        if self.pad_mask.len() != u || self.labels.len() != u {
            return Err(Error::shape(
                "SequenceBatch",
                format!(
                    "{} mask entries, {} labels for {u} utterances",
                    self.pad_mask.len(),
                    self.labels.len()
                ),
            ));
        }
        if self.pad_mask.iter().all(|&p| p) {
            return Err(Error::Input("every position is padding".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.speaker_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speaker_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features[0].cols()
    }

    /// Indices of the non-padded positions.
    pub fn real_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.pad_mask[i]).collect()
    }

    pub fn key_keep(&self) -> Vec<bool> {
        self.pad_mask.iter().map(|&p| !p).collect()
    }

    /// Appends zero-feature padded positions up to `len`.
    pub fn padded_to(&self, len: usize) -> Self {
        let mut out = self.clone();
        let extra = len.saturating_sub(self.len());
        if extra == 0 {
            return out;
        }
        let d = self.dim();
        for (dst, src) in out.features.iter_mut().zip(&self.features) {
            let mut data = src.as_slice().to_vec();
            data.extend(std::iter::repeat_n(T::zero(), extra * d));
            *dst = Mat::from_vec(len, d, data).expect("sized");
        }
        out.speaker_ids.extend(std::iter::repeat_n(0, extra));
        out.pad_mask.extend(std::iter::repeat_n(true, extra));
        out.labels.extend(std::iter::repeat_n(0, extra));
        out
    }
}

/// Pads every conversation of a batch to the longest one.
pub fn pad_batch<T: Scalar>(batch: &[SequenceBatch<T>]) -> Vec<SequenceBatch<T>> {
    let longest = batch.iter().map(SequenceBatch::len).max().unwrap_or(0);
    batch.iter().map(|b| b.padded_to(longest)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MagtConfig {
    pub d_model: usize,
    pub classes: usize,
    pub max_speakers: usize,
    /// Transformer blocks stacked per (anchor, source) pair.
    pub blocks_per_pair: usize,
    pub block: BlockConfig,
    /// Ablation: classify from `H_{t→t}` alone, skipping every cross-modal path.
    #[serde(default)]
    pub text_self_only: bool,
}

impl MagtConfig {
    pub fn new(d_model: usize, classes: usize) -> Self {
        Self {
            d_model,
            classes,
            max_speakers: 16,
            blocks_per_pair: 1,
            block: BlockConfig::default(),
            text_self_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model must be even, got {}",
                self.d_model
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.max_speakers == 0 || self.blocks_per_pair == 0 {
            return Err(Error::Config(
                "max_speakers and blocks_per_pair must be positive".into(),
            ));
        }
        if self.block.heads == 0 || !self.d_model.is_multiple_of(self.block.heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide d_model {}",
                self.block.heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.block.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.block.dropout
            )));
        }
        Ok(())
    }
}

/// `α = σ(H·Wᵀ + b)`, output `H ⊙ α`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub linear: Linear,
}

impl Gate {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(ps, name, d, d, true, rng),
        }
    }

    /// Returns `(H ⊙ α, α)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h: NodeId) -> Result<(NodeId, NodeId)> {
        let z = self.linear.forward(g, h)?;
        let alpha = g.sigmoid(z);
        Ok((g.mul(h, alpha)?, alpha))
    }
}

/// Graph-free gate for inspection and tests.
pub fn gate<T: Scalar>(h: &Mat<T>, w: &Mat<T>, b: &Mat<T>) -> Result<Mat<T>> {
    if w.shape() != (h.cols(), h.cols()) || b.shape() != (1, h.cols()) {
        return Err(Error::shape(
            "gate",
            format!("H {:?}, W {:?}, b {:?}", h.shape(), w.shape(), b.shape()),
        ));
    }
    let alpha = head_logits(w, b, h)?.map(sigmoid);
    h.zip_map(&alpha, |x, a| x * a)
}

/// A stack of blocks for one (anchor, source) pair.
#[derive(Clone, Debug)]
pub struct PairStack {
    pub blocks: Vec<TransformerBlock>,
}

impl PairStack {
    fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        cfg: &MagtConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..cfg.blocks_per_pair)
            .map(|i| {
                TransformerBlock::new(ps, &format!("{name}.{i}"), cfg.d_model, &cfg.block, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// Query stream `anchor`, key/value stream `source`; the query stream is
    /// carried through the stack while the source stays fixed.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        anchor: NodeId,
        source: NodeId,
        key_keep: &[bool],
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId> {
        let mut h = anchor;
        for b in &self.blocks {
            h = anchor_attend(g, b, h, source, key_keep, mode)?.out;
        }
        Ok(h)
    }
}

/// One transformer block with queries from `anchor` and keys/values from
/// `source`; keys with `key_keep[j] == false` get zero attention.
pub fn anchor_attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    block: &TransformerBlock,
    anchor: NodeId,
    source: NodeId,
    key_keep: &[bool],
    mode: &mut RunMode<'_>,
) -> Result<Attended> {
    if g.shape(anchor) != g.shape(source) {
        return Err(Error::shape(
            "anchor_attend",
            format!(
                "anchor {:?} vs source {:?}",
                g.shape(anchor),
                g.shape(source)
            ),
        ));
    }
    block.forward(g, anchor, source, key_keep, mode)
}

/// Named parameter handles of the anchor-gated transformer.
#[derive(Clone, Debug)]
pub struct MagtNet {
    pub speaker_table: ParamId,
    pub tt: PairStack,
    pub aa: PairStack,
    pub ta: PairStack,
    pub va: PairStack,
    pub vv: PairStack,
    pub tv: PairStack,
    pub av: PairStack,
    pub t_aenr: PairStack,
    pub t_venr: PairStack,
    pub gate_ta: Gate,
    pub gate_va: Gate,
    pub gate_tv: Gate,
    pub gate_av: Gate,
    pub gate_aenr_t: Gate,
    pub gate_venr_t: Gate,
    pub classifier: ModalityHead,
    /// Auxiliary heads on `t′`, `A_enr`, `V_enr`.
    pub aux: [ModalityHead; 3],
}

/// Graph nodes produced by one fused conversation.
#[derive(Clone, Debug)]
pub struct FusionNodes {
    pub logits: NodeId,
    pub fused: NodeId,
    /// `(t′, A_enr, V_enr)` when the model has those streams.
    pub streams: Option<[NodeId; 3]>,
    /// Aux logits on `t′`, `A_enr`, `V_enr`.
    pub aux_logits: Option<[NodeId; 3]>,
    pub gate_alphas: Vec<NodeId>,
}

/// A fusion network that can be trained by the stage-2 loop.
pub trait FusionNet {
    fn forward_sequence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &SequenceBatch<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<FusionNodes>;
}

impl MagtNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        cfg: &MagtConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let speaker_table = ps.add(
            "speaker_embedding",
            Mat::gaussian(cfg.max_speakers, d, 0.1, rng),
        );
        let mut stack = |name: &str, rng: &mut R| PairStack::new(ps, name, cfg, rng);
        let tt = stack("pair.t_t", rng)?;
        let aa = stack("pair.a_a", rng)?;
        let ta = stack("pair.t_a", rng)?;
        let va = stack("pair.v_a", rng)?;
        let vv = stack("pair.v_v", rng)?;
        let tv = stack("pair.t_v", rng)?;
        let av = stack("pair.a_v", rng)?;
        let t_aenr = stack("pair.aenr_t", rng)?;
        let t_venr = stack("pair.venr_t", rng)?;
        let mut gate = |name: &str, rng: &mut R| {
            let gt = Gate::new(ps, name, d, rng);
            ps.set(gt.linear.bias.expect("gate bias"), Mat::zeros(1, d))
                .expect("shape");
            gt
        };
        let gate_ta = gate("gate.t_a", rng);
        let gate_va = gate("gate.v_a", rng);
        let gate_tv = gate("gate.t_v", rng);
        let gate_av = gate("gate.a_v", rng);
        let gate_aenr_t = gate("gate.aenr_t", rng);
        let gate_venr_t = gate("gate.venr_t", rng);
        let classifier = ModalityHead::new(ps, "classifier", d, cfg.classes, rng);
        let aux = [
            ModalityHead::new(ps, "aux.text", d, cfg.classes, rng),
            ModalityHead::new(ps, "aux.audio", d, cfg.classes, rng),
            ModalityHead::new(ps, "aux.video", d, cfg.classes, rng),
        ];
        Ok(Self {
            speaker_table,
            tt,
            aa,
            ta,
            va,
            vv,
            tv,
            av,
            t_aenr,
            t_venr,
            gate_ta,
            gate_va,
            gate_tv,
            gate_av,
            gate_aenr_t,
            gate_venr_t,
            classifier,
            aux,
        })
    }

    pub fn gates(&self) -> [&Gate; 6] {
        [
            &self.gate_ta,
            &self.gate_va,
            &self.gate_tv,
            &self.gate_av,
            &self.gate_aenr_t,
            &self.gate_venr_t,
        ]
    }

    fn forward_impl<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &SequenceBatch<T>,
        text_self_only: bool,
        mode: &mut RunMode<'_>,
    ) -> Result<FusionNodes> {
        seq.validate()?;
        let (u, d) = (seq.len(), seq.dim());
        let pe = g.constant(positional_embedding(u, d)?);
        let se = speaker_embedding_node(g, &seq.speaker_ids, self.speaker_table)?;
        let pos = g.add(pe, se)?;
        let mut h = Vec::with_capacity(3);
        for f in &seq.features {
            let f = g.constant(f.clone());
            h.push(g.add(f, pos)?);
        }
        let (ht, ha, hv) = (h[0], h[1], h[2]);
        let keep = seq.key_keep();

        let h_tt = self.tt.forward(g, ht, ht, &keep, mode)?;
        if text_self_only {
            let logits = self.classifier.forward(g, h_tt)?;
            return Ok(FusionNodes {
                logits,
                fused: h_tt,
                streams: None,
                aux_logits: None,
                gate_alphas: Vec::new(),
            });
        }
        let mut alphas = Vec::with_capacity(6);
        let mut gated = |g: &mut Graph<'_, T>, gate: &Gate, x: NodeId| -> Result<NodeId> {
            let (y, a) = gate.forward(g, x)?;
            alphas.push(a);
            Ok(y)
        };

        let h_aa = self.aa.forward(g, ha, ha, &keep, mode)?;
        let h_ta = self.ta.forward(g, ha, ht, &keep, mode)?;
        let h_va = self.va.forward(g, ha, hv, &keep, mode)?;
        let g_ta = gated(g, &self.gate_ta, h_ta)?;
        let g_va = gated(g, &self.gate_va, h_va)?;
        let a_enr = g.add(h_aa, g_ta)?;
        let a_enr = g.add(a_enr, g_va)?;

        let h_vv = self.vv.forward(g, hv, hv, &keep, mode)?;
        let h_tv = self.tv.forward(g, hv, ht, &keep, mode)?;
        let h_av = self.av.forward(g, hv, ha, &keep, mode)?;
        let g_tv = gated(g, &self.gate_tv, h_tv)?;
        let g_av = gated(g, &self.gate_av, h_av)?;
        let v_enr = g.add(h_vv, g_tv)?;
        let v_enr = g.add(v_enr, g_av)?;

        let h_at = self.t_aenr.forward(g, ht, a_enr, &keep, mode)?;
        let h_vt = self.t_venr.forward(g, ht, v_enr, &keep, mode)?;
        let g_at = gated(g, &self.gate_aenr_t, h_at)?;
        let g_vt = gated(g, &self.gate_venr_t, h_vt)?;
        let t_prime = g.add(h_tt, g_at)?;
        let t_prime = g.add(t_prime, g_vt)?;

        let logits = self.classifier.forward(g, t_prime)?;
        let aux_logits = [
            self.aux[0].forward(g, t_prime)?,
            self.aux[1].forward(g, a_enr)?,
            self.aux[2].forward(g, v_enr)?,
        ];
        Ok(FusionNodes {
            logits,
            fused: t_prime,
            streams: Some([t_prime, a_enr, v_enr]),
            aux_logits: Some(aux_logits),
            gate_alphas: alphas,
        })
    }
}

/// Parameters plus layout of an anchor-gated transformer.
#[derive(Clone, Debug)]
pub struct MagtModel<T> {
    pub config: MagtConfig,
    pub params: ParamSet<T>,
    pub net: MagtNet,
}

impl<T: Scalar> MagtModel<T> {
    pub fn new(config: MagtConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = MagtNet::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            net,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        write_checkpoint(&self.params, config_hash, path)
    }

    /// Rebuilds the layout from `config` and fills it from a checkpoint.
    /// Returns the model and the config hash stored in the file.
    pub fn load(config: MagtConfig, path: impl AsRef<Path>) -> Result<(Self, String)> {
        let mut model = Self::new(config, 0)?;
        let (saved, hash) = read_checkpoint::<T>(path)?;
        let n = model.params.load_matching(&saved)?;
        if n != model.params.len() || n != saved.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model expects {}, {n} matched",
                saved.len(),
                model.params.len()
            )));
        }
        Ok((model, hash))
    }
}

impl FusionNet for MagtNet {
    fn forward_sequence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &SequenceBatch<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<FusionNodes> {
        self.forward_impl(g, seq, false, mode)
    }
}

/// [`MagtNet`] with the text-self-only switch applied.
pub struct ConfiguredMagt<'a> {
    pub net: &'a MagtNet,
    pub text_self_only: bool,
}

impl FusionNet for ConfiguredMagt<'_> {
    fn forward_sequence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &SequenceBatch<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<FusionNodes> {
        self.net.forward_impl(g, seq, self.text_self_only, mode)
    }
}

impl<T: Scalar> MagtModel<T> {
    pub fn fusion(&self) -> ConfiguredMagt<'_> {
        ConfiguredMagt {
            net: &self.net,
            text_self_only: self.config.text_self_only,
        }
    }
}

/// Eval-mode outputs of [`magt_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct MagtForward<T> {
    pub fused: Mat<T>,
    pub logits: Mat<T>,
    pub aux_logits: BTreeMap<Modality, Mat<T>>,
    pub gate_alphas: Vec<Mat<T>>,
}

impl<T: Scalar> MagtForward<T> {
    /// Row-wise argmax of the class probabilities; ties go to the lowest class.
    pub fn predictions(&self) -> Vec<usize> {
        self.logits.softmax_rows().argmax_rows()
    }
}

pub fn magt_forward<T: Scalar>(
    batch: &SequenceBatch<T>,
    model: &MagtModel<T>,
) -> Result<MagtForward<T>> {
    let mut g = Graph::with_params(&model.params);
    let out = model
        .fusion()
        .forward_sequence(&mut g, batch, &mut RunMode::Eval)?;
    let mut aux_logits = BTreeMap::new();
    if let Some(aux) = out.aux_logits {
        for (m, n) in Modality::ALL.into_iter().zip(aux) {
            aux_logits.insert(m, g.value(n).clone());
        }
    }
    Ok(MagtForward {
        fused: g.value(out.fused).clone(),
        logits: g.value(out.logits).clone(),
        aux_logits,
        gate_alphas: out
            .gate_alphas
            .iter()
            .map(|&a| g.value(a).clone())
            .collect(),
    })
}

#[cfg(test)]
mod tests;
