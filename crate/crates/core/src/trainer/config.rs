//! Run configuration: every knob of a two-stage run, serialized as JSON.
//!
//! Three presets ship: `iemocap` and `meld` carry the published
//! hyperparameters at full width, `desk` shrinks widths and raises learning
//! rates so the synthetic pipeline trains in minutes on one CPU.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::datamodel::Split;
use crate::datamodel::{LabelSpace, Separability, SplitCounts, SynthCorpusSpec};
use crate::encoders::PromptConfig;
use crate::error::{Error, Result};
use crate::evalbench::{BenchConfig, ProbeConfig};
use crate::magt::{ConcatConfig, MagtConfig};
use crate::nn::BlockConfig;
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Distillation temperature shared by both stages.
    pub tau: f64,
    pub dataset: DatasetConfig,
    pub text: TextConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub label_space: LabelSpace,
    /// Conversation manifest; when absent the synthetic corpus is used.
    pub manifest: Option<PathBuf>,
    /// Precomputed input features for a manifest corpus.
    pub features: Option<FeaturePaths>,
    pub synth: SynthSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturePaths {
    pub text: PathBuf,
    pub audio: PathBuf,
    pub video: PathBuf,
}

/// Synthetic corpus knobs. Label space, seed and vector width come from the
/// surrounding config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub n_conversations: SplitCounts,
    pub utterances_per_conversation: [usize; 2],
    pub n_speakers: usize,
    pub separability: Separability,
    pub with_text: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextEncoderKind {
    /// Residual projection of a precomputed text vector.
    Projection,
    /// Small transformer over the hashed prompt tokens.
    Toy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub encoder: TextEncoderKind,
    pub mask_token: String,
    pub sep_token: String,
    pub max_context_tokens: Option<usize>,
    pub vocab_size: usize,
    pub layers: usize,
}

impl TextConfig {
    pub fn prompt(&self) -> PromptConfig {
        PromptConfig {
            mask_token: self.mask_token.clone(),
            sep_token: self.sep_token.clone(),
            max_context_tokens: self.max_context_tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Config {
    /// Width `d` of every utterance-level feature.
    pub dimension: usize,
    pub learning_rate: f64,
    pub batch: usize,
    /// Applied to the teacher and to each student separately.
    pub epochs: usize,
    pub optim: OptimConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy plus weighted distillation terms.
    Full,
    /// Cross-entropy alone; distillation terms are never built.
    CeOnly,
}

/// Which stage-1 store feeds a stage-2 slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BranchName {
    T,
    A,
    V,
    #[serde(rename = "A_KD")]
    AKd,
    #[serde(rename = "V_KD")]
    VKd,
}

impl BranchName {
    pub const ALL: [BranchName; 5] = [Self::T, Self::A, Self::V, Self::AKd, Self::VKd];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::T => "T",
            Self::A => "A",
            Self::V => "V",
            Self::AKd => "A_KD",
            Self::VKd => "V_KD",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }

    pub fn modality(self) -> crate::datamodel::Modality {
        use crate::datamodel::Modality;
        match self {
            Self::T => Modality::Text,
            Self::A | Self::AKd => Modality::Audio,
            Self::V | Self::VKd => Modality::Video,
        }
    }

    pub fn distilled(self) -> bool {
        matches!(self, Self::AKd | Self::VKd)
    }
}

impl std::fmt::Display for BranchName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Config {
    pub learning_rate: f64,
    /// Conversations per batch.
    pub batch: usize,
    pub epochs: usize,
    pub alpha: f64,
    pub beta: f64,
    pub objective: Objective,
    /// Stage-1 stores for the audio and video slots (`A` or `A_KD`, `V` or `V_KD`).
    pub audio: BranchName,
    pub video: BranchName,
    pub optim: OptimConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub block: BlockConfig,
    pub blocks_per_pair: usize,
    pub max_speakers: usize,
    pub text_self_only: bool,
    pub concat_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Split scored by the ablation table.
    pub split: Split,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl SweepConfig {
    /// Row-major `(α, β)` grid.
    pub fn grid(&self) -> Vec<(f64, f64)> {
        self.alphas
            .iter()
            .flat_map(|&a| self.betas.iter().map(move |&b| (a, b)))
            .collect()
    }
}

pub const PRESETS: [&str; 3] = ["desk", "iemocap", "meld"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Published IEMOCAP settings at full feature width.
    pub fn iemocap() -> Self {
        Self {
            seed: 0,
            tau: 2.0,
            dataset: DatasetConfig {
                label_space: LabelSpace::iemocap(),
                manifest: None,
                features: None,
                synth: SynthSettings::default_corpus(),
            },
            text: TextConfig {
                encoder: TextEncoderKind::Projection,
                mask_token: "<mask>".into(),
                sep_token: "</s>".into(),
                max_context_tokens: None,
                vocab_size: 4096,
                layers: 2,
            },
            stage1: Stage1Config {
                dimension: 768,
                learning_rate: 1e-5,
                batch: 4,
                epochs: 10,
                optim: OptimConfig::default(),
            },
            stage2: Stage2Config {
                learning_rate: 1e-5,
                batch: 16,
                epochs: 30,
                alpha: 0.7,
                beta: 0.8,
                objective: Objective::Full,
                audio: BranchName::AKd,
                video: BranchName::V,
                optim: OptimConfig::default(),
            },
            model: ModelConfig {
                block: BlockConfig {
                    heads: 8,
                    ..BlockConfig::default()
                },
                blocks_per_pair: 1,
                max_speakers: 16,
                text_self_only: false,
                concat_hidden: 768,
            },
            eval: EvalConfig {
                split: Split::Test,
                probe: ProbeConfig::default(),
            },
            sweep: SweepConfig {
                alphas: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
                betas: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            },
            bench: BenchConfig::default(),
        }
    }

    /// Published MELD settings.
    pub fn meld() -> Self {
        let mut c = Self::iemocap();
        c.dataset.label_space = LabelSpace::meld();
        c.stage1.learning_rate = 1e-4;
        c.stage2.learning_rate = 1e-4;
        c.stage2.alpha = 0.01;
        c.stage2.beta = 0.09;
        c.sweep = SweepConfig {
            alphas: vec![0.0, 0.01, 0.05, 0.1],
            betas: vec![0.0, 0.03, 0.09, 0.2],
        };
        c
    }

    /// Small widths, faster learning rates and small distillation
    /// coefficients for CPU-scale synthetic runs. Everything else follows the
    /// IEMOCAP preset.
    pub fn desk() -> Self {
        let mut c = Self::iemocap();
        c.stage1.dimension = 32;
        c.stage1.learning_rate = 1e-3;
        c.stage2.learning_rate = 1e-3;
        c.model.block.heads = 4;
        c.model.concat_hidden = 32;
        c.text.vocab_size = 512;
        c.text.layers = 1;
        c.eval.split = Split::Dev;
        // Batch-level distillation terms over ~160 utterances dwarf the
        // cross-entropy; the smaller published pair keeps CE dominant.
        c.stage2.alpha = 0.01;
        c.stage2.beta = 0.09;
        c
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "iemocap" => Some(Self::iemocap()),
            "meld" => Some(Self::meld()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain config")
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("plain config");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Applies `a.b.c=value`. The value is read as JSON when it parses,
    /// otherwise as a bare string; the result must still deserialize.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!(
                "override {assignment:?} has an empty key"
            )));
        }
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self).expect("plain config");
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        *slot = value;
        let cfg: Self =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        let s1 = &self.stage1;
        if s1.dimension < self.dataset.label_space.len() {
            return bad(format!(
                "stage1.dimension {} is smaller than the {} classes",
                s1.dimension,
                self.dataset.label_space.len()
            ));
        }
        if s1.batch < 2 {
            return bad("stage1.batch must be at least 2 for the batch-level losses".into());
        }
        let s2 = &self.stage2;
        if s2.batch == 0 {
            return bad("stage2.batch must be positive".into());
        }
        for (what, lr) in [("stage1", s1.learning_rate), ("stage2", s2.learning_rate)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{what}.learning_rate must be positive, got {lr}"));
            }
        }
        for (what, c) in [("alpha", s2.alpha), ("beta", s2.beta)] {
            if !(c.is_finite() && c >= 0.0) {
                return bad(format!("stage2.{what} must be non-negative, got {c}"));
            }
        }
        if s2.audio.modality() != crate::datamodel::Modality::Audio
            || s2.video.modality() != crate::datamodel::Modality::Video
        {
            return bad(format!(
                "stage2.audio/video must name audio and video branches, got {} and {}",
                s2.audio, s2.video
            ));
        }
        if self.text.encoder == TextEncoderKind::Toy
            && !self.dataset.synth.with_text
            && self.dataset.manifest.is_none()
        {
            return bad(
                "the toy text encoder needs text payloads (dataset.synth.with_text)".into(),
            );
        }
        if self.dataset.features.is_some() != self.dataset.manifest.is_some() {
            return bad("dataset.manifest and dataset.features must be given together".into());
        }
        if self
            .sweep
            .alphas
            .iter()
            .chain(&self.sweep.betas)
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return bad("sweep coefficients must be non-negative".into());
        }
        self.magt_config().validate()?;
        self.synth_spec()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthCorpusSpec {
        let s = &self.dataset.synth;
        SynthCorpusSpec {
            n_conversations: s.n_conversations.clone(),
            utterances_per_conversation: s.utterances_per_conversation,
            n_speakers: s.n_speakers,
            label_space: self.dataset.label_space.clone(),
            separability: s.separability.clone(),
            noise_dim: self.stage1.dimension,
            seed: self.seed,
            with_text: s.with_text,
        }
    }

    pub fn magt_config(&self) -> MagtConfig {
        MagtConfig {
            d_model: self.stage1.dimension,
            classes: self.dataset.label_space.len(),
            max_speakers: self.model.max_speakers,
            blocks_per_pair: self.model.blocks_per_pair,
            block: self.model.block.clone(),
            text_self_only: self.model.text_self_only,
        }
    }

    pub fn concat_config(&self) -> ConcatConfig {
        ConcatConfig {
            d_model: self.stage1.dimension,
            hidden: self.model.concat_hidden,
            classes: self.dataset.label_space.len(),
            dropout: self.model.block.dropout,
        }
    }
}

impl SynthSettings {
    pub fn default_corpus() -> Self {
        let d = SynthCorpusSpec::default();
        Self {
            n_conversations: d.n_conversations,
            utterances_per_conversation: d.utterances_per_conversation,
            n_speakers: d.n_speakers,
            separability: d.separability,
            with_text: false,
        }
    }
}
