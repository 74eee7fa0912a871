//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed container: {0}")]
    Format(String),

    #[error("token id {id} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("name {name:?} is ambiguous, matching ids: {}", ids.join(", "))]
    Ambiguous { name: String, ids: Vec<String> },

    #[error("digest mismatch for {id}: file content hashes to {actual}")]
    DigestMismatch { id: String, actual: String },

    #[error("content collision on {0}: stored payload differs")]
    Collision(String),

    #[error("not implemented: {0}")]
    NotImplemented(String),

    #[error("unknown metric {0:?}")]
    UnknownMetric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code used in HTTP error bodies and manifests.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::NonFinite(_) => "non_finite",
            Error::Format(_) => "format",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::NotFound(_) => "not_found",
            Error::Ambiguous { .. } => "ambiguous",
            Error::DigestMismatch { .. } => "digest_mismatch",
            Error::Collision(_) => "collision",
            Error::NotImplemented(_) => "not_implemented",
            Error::UnknownMetric(_) => "unknown_metric",
            Error::Json(_) => "json",
        }
    }
}
