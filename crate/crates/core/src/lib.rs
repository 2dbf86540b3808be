//! Two-stage multimodal emotion recognition in conversation.
//!
//! Stage 1 builds utterance-level features per modality and distills a text
//! teacher into audio and video students with Pearson-distance soft-label and
//! similarity-matrix feature losses. Stage 2 fuses the three feature sequences
//! of a conversation with an anchor-gated transformer.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used by the command-line pipeline.

pub mod autodiff;
pub mod datamodel;
pub mod distill;
pub mod encoders;
pub mod error;
pub mod evalbench;
pub mod magt;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;
pub use tensor::Mat;

/// Precision of the reference training path.
pub type Real = f64;
pub type Mat32 = Mat<f32>;
pub type Mat64 = Mat<f64>;
