use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds the limit of {max}")]
    Length { len: usize, max: usize },

    #[error("partition error: {0}")]
    Partition(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value {0} outside the domain [0, 1]")]
    Domain(f64),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("expected a checkpoint at stage {expected:?}, found {found:?}")]
    StageMismatch { expected: String, found: String },

    #[error("corpus generation failed: {0}")]
    Generation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("malformed record in {path}: {message}")]
    Record { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
