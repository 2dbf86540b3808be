//! Stage-1 utterance encoders and their classification heads.
//!
//! An encoder maps a batch of raw inputs (stored vectors or prompted text) to
//! `B × d` utterance features inside a [`Graph`]; a [`ModalityHead`] maps
//! those features to class logits. Both keep only [`ParamId`]s, the values
//! live in the [`ParamSet`] of the owning [`Branch`].

mod prompt;

pub use prompt::{build_context, build_prompt, PromptConfig, PromptedInput, SpeakerNames};

use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::datamodel::Modality;
use crate::error::{Error, Result};
use crate::magt::positional_embedding;
use crate::nn::{BlockConfig, Linear, RunMode, TransformerBlock};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// One encoder input: a stored feature vector or a prompted text.
#[derive(Clone, Copy, Debug)]
pub enum EncoderInput<'a> {
    Vector(&'a [f32]),
    Prompt(&'a PromptedInput),
}

pub trait ModalityEncoder {
    fn modality(&self) -> Modality;
    /// Output feature width `d`.
    fn dim(&self) -> usize;
    /// Identifier recorded as feature-store provenance.
    fn provenance(&self) -> String;
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[EncoderInput<'_>],
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId>;
}

/// `F = x + tanh(W·x + b)` over stored vectors of width `d`.
#[derive(Clone, Debug)]
pub struct ProjectionEncoder {
    pub modality: Modality,
    pub proj: Linear,
}

impl ProjectionEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        modality: Modality,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            modality,
            proj: Linear::new(ps, &format!("{modality}.proj"), dim, dim, true, rng),
        }
    }
}

pub(crate) fn stack_vectors<T: Scalar>(inputs: &[EncoderInput<'_>], dim: usize) -> Result<Mat<T>> {
    let mut data = Vec::with_capacity(inputs.len() * dim);
    for (i, inp) in inputs.iter().enumerate() {
        match inp {
            EncoderInput::Vector(v) if v.len() == dim => {
                data.extend(v.iter().map(|&x| T::from_f64_lossy(x as f64)))
            }
            EncoderInput::Vector(v) => {
                return Err(Error::Input(format!(
                    "input {i} has width {} for encoder width {dim}",
                    v.len()
                )))
            }
            EncoderInput::Prompt(_) => {
                return Err(Error::Input(format!(
                    "input {i} is a prompt but the encoder reads stored vectors"
                )))
            }
        }
    }
    Mat::from_vec(inputs.len(), dim, data)
}

impl ModalityEncoder for ProjectionEncoder {
    fn modality(&self) -> Modality {
        self.modality
    }

    fn dim(&self) -> usize {
        self.proj.out_dim
    }

    fn provenance(&self) -> String {
        format!("projection/{}/d{}", self.modality, self.dim())
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[EncoderInput<'_>],
        _mode: &mut RunMode<'_>,
    ) -> Result<NodeId> {
        let x = g.constant(stack_vectors(inputs, self.dim())?);
        let h = self.proj.forward(g, x)?;
        let h = g.tanh(h);
        g.add(x, h)
    }
}

/// Whitespace tokens hashed (FNV-1a) into a fixed vocabulary. Ids 0 and 1 are
/// reserved for the mask and separator literals.
#[derive(Clone, Debug)]
pub struct HashVocab {
    pub size: usize,
    pub mask_token: String,
    pub sep_token: String,
}

impl HashVocab {
    pub const MASK_ID: usize = 0;
    pub const SEP_ID: usize = 1;

    pub fn id(&self, token: &str) -> usize {
        if token == self.mask_token {
            return Self::MASK_ID;
        }
        if token == self.sep_token {
            return Self::SEP_ID;
        }
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        2 + (h % (self.size as u64 - 2)) as usize
    }
}

/// Small self-attention encoder over hashed tokens; the feature is the final
/// hidden state at the mask position, passed through an output projection.
#[derive(Clone, Debug)]
pub struct ToyTextEncoder {
    pub vocab: HashVocab,
    pub embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub out: Linear,
    dim: usize,
}

impl ToyTextEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        dim: usize,
        vocab: HashVocab,
        layers: usize,
        block: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if vocab.size < 3 {
            return Err(Error::Config(format!(
                "text vocabulary of {} leaves no room for ordinary tokens",
                vocab.size
            )));
        }
        let embed = ps.add("text.embed", Mat::gaussian(vocab.size, dim, 0.1, rng));
        let blocks = (0..layers)
            .map(|l| TransformerBlock::new(ps, &format!("text.block{l}"), dim, block, rng))
            .collect::<Result<_>>()?;
        let out = Linear::new(ps, "text.out", dim, dim, true, rng);
        Ok(Self {
            vocab,
            embed,
            blocks,
            out,
            dim,
        })
    }
}

impl ModalityEncoder for ToyTextEncoder {
    fn modality(&self) -> Modality {
        Modality::Text
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn provenance(&self) -> String {
        format!(
            "toy-text/v{}/l{}/d{}",
            self.vocab.size,
            self.blocks.len(),
            self.dim
        )
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[EncoderInput<'_>],
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId> {
        let table = g.param(self.embed);
        let mut rows = Vec::with_capacity(inputs.len());
        for (i, inp) in inputs.iter().enumerate() {
            let EncoderInput::Prompt(p) = inp else {
                return Err(Error::Input(format!(
                    "input {i} is a stored vector but the text encoder reads prompts"
                )));
            };
            let ids: Vec<usize> = p.tokens().iter().map(|t| self.vocab.id(t)).collect();
            if p.mask_position >= ids.len() {
                return Err(Error::Input(format!(
                    "mask position {} beyond {} tokens",
                    p.mask_position,
                    ids.len()
                )));
            }
            let emb = g.select_rows(table, &ids)?;
            let pe = g.constant(positional_embedding(ids.len(), self.dim)?);
            let mut h = g.add(emb, pe)?;
            let keep = vec![true; ids.len()];
            for block in &self.blocks {
                h = block.forward(g, h, h, &keep, mode)?.out;
            }
            rows.push(g.select_rows(h, &[p.mask_position])?);
        }
        let stacked = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        self.out.forward(g, stacked)
    }
}

/// The encoders a stage-1 branch can hold.
#[derive(Clone, Debug)]
pub enum Encoder {
    Projection(ProjectionEncoder),
    ToyText(ToyTextEncoder),
}

impl ModalityEncoder for Encoder {
    fn modality(&self) -> Modality {
        match self {
            Encoder::Projection(e) => e.modality(),
            Encoder::ToyText(e) => e.modality(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Encoder::Projection(e) => e.dim(),
            Encoder::ToyText(e) => e.dim(),
        }
    }

    fn provenance(&self) -> String {
        match self {
            Encoder::Projection(e) => e.provenance(),
            Encoder::ToyText(e) => e.provenance(),
        }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inputs: &[EncoderInput<'_>],
        mode: &mut RunMode<'_>,
    ) -> Result<NodeId> {
        match self {
            Encoder::Projection(e) => e.forward(g, inputs, mode),
            Encoder::ToyText(e) => e.forward(g, inputs, mode),
        }
    }
}

/// Linear classifier `logits = F · Wᵀ + b` with `W: C × d`.
#[derive(Clone, Debug)]
pub struct ModalityHead {
    pub linear: Linear,
}

impl ModalityHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(ps, name, dim, classes, true, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.linear.out_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: NodeId) -> Result<NodeId> {
        self.linear.forward(g, features)
    }
}

/// `features · weightᵀ + bias` without a graph.
pub fn head_logits<T: Scalar>(weight: &Mat<T>, bias: &Mat<T>, features: &Mat<T>) -> Result<Mat<T>> {
    if features.cols() != weight.cols() || bias.shape() != (1, weight.rows()) {
        return Err(Error::shape(
            "head_logits",
            format!(
                "features {:?}, weight {:?}, bias {:?}",
                features.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = features.matmul_nt(weight)?;
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
            *o += b;
        }
    }
    Ok(out)
}

/// Runs `encoder` in eval mode and returns the `B × d` feature matrix.
pub fn encode_batch<T: Scalar, E: ModalityEncoder>(
    encoder: &E,
    params: &ParamSet<T>,
    inputs: &[EncoderInput<'_>],
) -> Result<Mat<T>> {
    let mut g = Graph::with_params(params);
    let out = encoder.forward(&mut g, inputs, &mut RunMode::Eval)?;
    let m = g.value(out).clone();
    if !m.is_finite() {
        return Err(Error::Divergence(format!(
            "{} encoder produced non-finite features",
            encoder.modality()
        )));
    }
    Ok(m)
}

/// An encoder and its head sharing one parameter set.
#[derive(Clone, Debug)]
pub struct Branch<T> {
    pub params: ParamSet<T>,
    pub encoder: Encoder,
    pub head: ModalityHead,
}

impl<T: Scalar> Branch<T> {
    pub fn projection<R: Rng + ?Sized>(
        modality: Modality,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamSet::new();
        let enc = ProjectionEncoder::new(&mut params, modality, dim, rng);
        let head = ModalityHead::new(&mut params, &format!("{modality}.head"), dim, classes, rng);
        Self {
            params,
            encoder: Encoder::Projection(enc),
            head,
        }
    }

    pub fn toy_text<R: Rng + ?Sized>(
        dim: usize,
        classes: usize,
        vocab: HashVocab,
        layers: usize,
        block: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = ParamSet::new();
        let enc = ToyTextEncoder::new(&mut params, dim, vocab, layers, block, rng)?;
        let head = ModalityHead::new(&mut params, "text.head", dim, classes, rng);
        Ok(Self {
            params,
            encoder: Encoder::ToyText(enc),
            head,
        })
    }

    pub fn modality(&self) -> Modality {
        self.encoder.modality()
    }

    /// Features and logits in eval mode.
    pub fn infer(&self, inputs: &[EncoderInput<'_>]) -> Result<(Mat<T>, Mat<T>)> {
        let feats = encode_batch(&self.encoder, &self.params, inputs)?;
        let w = self.params.get(self.head.linear.weight);
        let b = self
            .params
            .get(self.head.linear.bias.expect("heads carry a bias"));
        let logits = head_logits(w, b, &feats)?;
        Ok((feats, logits))
    }
}
