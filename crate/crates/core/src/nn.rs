//! Layers built on the autodiff tape: affine maps, layer norm, dropout,
//! multi-head attention and the (cross-)attention transformer block.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::scalar::{lit, Scalar};
use crate::tensor::Mat;

/// Whether a forward pass is stochastic (training, dropout active) or not.
pub enum RunMode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl RunMode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, RunMode::Train(_))
    }
}

pub fn dropout<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    rate: f64,
    mode: &mut RunMode<'_>,
) -> Result<NodeId> {
    let RunMode::Train(rng) = mode else {
        return Ok(x);
    };
    if rate <= 0.0 {
        return Ok(x);
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 - rate;
    let scale: T = lit(1.0 / keep);
    let data = (0..r * c)
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        })
        .collect();
    g.mul_const(x, Mat::from_vec(r, c, data)?)
}

/// `y = x · Wᵀ + b` with `W: out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(±1/√in) weights, zero bias.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = ps.add(
            format!("{name}.weight"),
            Mat::uniform(out_dim, in_dim, bound, rng),
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Mat::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        if g.shape(x).1 != self.in_dim {
            return Err(Error::shape(
                "Linear::forward",
                format!("input width {} for in_dim {}", g.shape(x).1, self.in_dim),
            ));
        }
        let w = g.param(self.weight);
        let y = g.matmul_nt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Mat::full(1, dim, T::one())),
            beta: ps.add(format!("{name}.beta"), Mat::zeros(1, dim)),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let ga = g.param(self.gamma);
        let be = g.param(self.beta);
        g.layer_norm(x, ga, be, lit(self.eps))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub heads: usize,
    /// Feed-forward width as a multiple of the model width.
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Normalize before each sublayer (true) or after the residual sum (false).
    pub pre_norm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            pre_norm: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub head_dim: usize,
}

/// Output of an attention call, with the per-head weight matrices kept for inspection.
pub struct Attended {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, true, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, true, rng),
            heads,
            head_dim: dim / heads,
        })
    }

    /// Queries from `query`, keys and values from `source`. Key position `j` is
    /// ignored when `key_keep[j]` is false.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: NodeId,
        source: NodeId,
        key_keep: &[bool],
    ) -> Result<Attended> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, source)?;
        let v = self.v.forward(g, source)?;
        let scale: T = lit(1.0 / (self.head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.head_dim;
            let qh = g.slice_cols(q, off, self.head_dim)?;
            let kh = g.slice_cols(k, off, self.head_dim)?;
            let vh = g.slice_cols(v, off, self.head_dim)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let p = g.masked_softmax_rows(scores, key_keep)?;
            outs.push(g.matmul(p, vh)?);
            weights.push(p);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        Ok(Attended {
            out: self.o.forward(g, cat)?,
            weights,
        })
    }
}

/// Transformer encoder block whose query stream may differ from its key/value
/// stream. With `query == source` it is an ordinary self-attention block.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_q: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub norm_ff: LayerNorm,
    pub cfg: BlockConfig,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let attn = MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, cfg.heads, rng)?;
        let hidden = dim * cfg.ffn_mult.max(1);
        let ff_in = Linear::new(ps, &format!("{name}.ff_in"), dim, hidden, true, rng);
        let ff_out = Linear::new(ps, &format!("{name}.ff_out"), hidden, dim, true, rng);
        let norm_q = LayerNorm::new(ps, &format!("{name}.norm_q"), dim);
        let norm_kv = cfg
            .pre_norm
            .then(|| LayerNorm::new(ps, &format!("{name}.norm_kv"), dim));
        let norm_ff = LayerNorm::new(ps, &format!("{name}.norm_ff"), dim);
        Ok(Self {
            attn,
            ff_in,
            ff_out,
            norm_q,
            norm_kv,
            norm_ff,
            cfg: cfg.clone(),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: NodeId,
        source: NodeId,
        key_keep: &[bool],
        mode: &mut RunMode<'_>,
    ) -> Result<Attended> {
        if g.shape(query).1 != g.shape(source).1 {
            return Err(Error::shape(
                "TransformerBlock::forward",
                format!("query {:?} vs source {:?}", g.shape(query), g.shape(source)),
            ));
        }
        if key_keep.len() != g.shape(source).0 {
            return Err(Error::shape(
                "TransformerBlock::forward",
                format!(
                    "{} mask entries for {} keys",
                    key_keep.len(),
                    g.shape(source).0
                ),
            ));
        }
        let rate = self.cfg.dropout;
        if let Some(norm_kv) = &self.norm_kv {
            let qn = self.norm_q.forward(g, query)?;
            let kvn = norm_kv.forward(g, source)?;
            let att = self.attn.forward(g, qn, kvn, key_keep)?;
            let a = dropout(g, att.out, rate, mode)?;
            let h = g.add(query, a)?;
            let hn = self.norm_ff.forward(g, h)?;
            let f = self.feed_forward(g, hn)?;
            let f = dropout(g, f, rate, mode)?;
            Ok(Attended {
                out: g.add(h, f)?,
                weights: att.weights,
            })
        } else {
            let att = self.attn.forward(g, query, source, key_keep)?;
            let a = dropout(g, att.out, rate, mode)?;
            let h = g.add(query, a)?;
            let h = self.norm_q.forward(g, h)?;
            let f = self.feed_forward(g, h)?;
            let f = dropout(g, f, rate, mode)?;
            let o = g.add(h, f)?;
            Ok(Attended {
                out: self.norm_ff.forward(g, o)?,
                weights: att.weights,
            })
        }
    }

    fn feed_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.ff_in.forward(g, x)?;
        let h = g.relu(h);
        self.ff_out.forward(g, h)
    }
}
