//! Test-time steering for small decoder-only language models.
//!
//! Steering vectors are extracted from contrastive data, optionally merged,
//! and added to the residual stream with a signed multiplier while the model
//! runs. Weights are never modified.

pub mod applier;
pub mod datasets;
pub mod digest;
pub mod error;
pub mod eval;
mod fsutil;
pub mod generators;
pub mod hparams;
pub mod merge;
pub mod model;
pub mod store;
pub mod tensor;
pub mod vector;

pub use error::{Error, Result};
pub use model::{
    ByteTokenizer, ForwardOutput, ForwardTrace, Hook, HookPoint, Model, ModelConfig, SamplingMode, SamplingParams, Site,
};
pub use vector::SteeringVector;
