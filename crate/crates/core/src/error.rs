use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-norm vector at row {row}")]
    ZeroNorm { row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value in layer {layer} attention logits")]
    NonFiniteLogits { layer: usize },

    #[error("loss diverged (non-finite) at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("object name {0:?} is not a single token")]
    MultiTokenObject(String),

    #[error("degenerate box with zero area: {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("invalid detection record {image_id}: {reason}")]
    InvalidRecord { image_id: String, reason: String },

    #[error("records disagree on object count (expected k={expected}): {offenders:?}")]
    MixedObjectCount { expected: usize, offenders: Vec<String> },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("blob length mismatch: expected {expected} bytes, found {found}")]
    BlobLength { expected: usize, found: usize },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("unsupported dtype {0:?} (expected \"f32le\")")]
    Dtype(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
