//! Dual-stream contrastive pretraining with adversarial masking and
//! gradually soft parameter sharing, built on a small reverse-mode tape.

pub mod autodiff;
pub mod certify;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod harness;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod sharing;
pub mod tensor;
pub mod train;
pub mod transformer;
pub mod vqa;

#[cfg(test)]
pub(crate) mod oracle;

pub use autodiff::{Gradients, Primitive, Tape, Trainable, Var};
pub use error::{Error, Phase, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
