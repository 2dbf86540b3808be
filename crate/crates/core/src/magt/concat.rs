//! Concatenation fusion baseline: per-modality linear, layer norm and
//! dropout, one shared block applied to each modality, concatenation and a
//! linear classifier.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FusionNet, FusionNodes, SequenceBatch};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::nn::{dropout, LayerNorm, Linear, RunMode};
use crate::params::{write_checkpoint, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatConfig {
    pub d_model: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct ConcatNet {
    pub input: [Linear; 3],
    pub norm: [LayerNorm; 3],
    pub shared: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl ConcatNet {
    pub fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        cfg: &ConcatConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.d_model == 0 || cfg.hidden == 0 || cfg.classes < 2 {
            return Err(Error::Config(format!("invalid concat config {cfg:?}")));
        }
        let names = ["text", "audio", "video"];
        let input = names.map(|m| {
            Linear::new(
                ps,
                &format!("concat.{m}.in"),
                cfg.d_model,
                cfg.hidden,
                true,
                rng,
            )
        });
        let norm = names.map(|m| LayerNorm::new(ps, &format!("concat.{m}.norm"), cfg.hidden));
        let shared = Linear::new(ps, "concat.shared", cfg.hidden, cfg.hidden, true, rng);
        let out = Linear::new(ps, "concat.out", 3 * cfg.hidden, cfg.classes, true, rng);
        Ok(Self {
            input,
            norm,
            shared,
            out,
            dropout: cfg.dropout,
        })
    }
}

impl FusionNet for ConcatNet {
    fn forward_sequence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &SequenceBatch<T>,
        mode: &mut RunMode<'_>,
    ) -> Result<FusionNodes> {
        seq.validate()?;
        let mut slots = Vec::with_capacity(3);
        for m in 0..3 {
            let x = g.constant(seq.features[m].clone());
            let h = self.input[m].forward(g, x)?;
            let h = self.norm[m].forward(g, h)?;
            let h = dropout(g, h, self.dropout, mode)?;
            let s = self.shared.forward(g, h)?;
            slots.push(g.relu(s));
        }
        let fused = g.concat_cols(&slots)?;
        let logits = self.out.forward(g, fused)?;
        Ok(FusionNodes {
            logits,
            fused,
            streams: None,
            aux_logits: None,
            gate_alphas: Vec::new(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ConcatModel<T> {
    pub config: ConcatConfig,
    pub params: ParamSet<T>,
    pub net: ConcatNet,
}

impl<T: Scalar> ConcatModel<T> {
    pub fn new(config: ConcatConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = ConcatNet::new(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            params,
            net,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        write_checkpoint(&self.params, config_hash, path)
    }
}

/// Eval-mode logits `U × C`.
pub fn concat_forward<T: Scalar>(
    batch: &SequenceBatch<T>,
    model: &ConcatModel<T>,
) -> Result<Mat<T>> {
    let mut g = Graph::with_params(&model.params);
    let out = model
        .net
        .forward_sequence(&mut g, batch, &mut RunMode::Eval)?;
    Ok(g.value(out.logits).clone())
}
