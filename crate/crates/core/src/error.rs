//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the data model, tensor engine, training pipeline, and
/// attribution machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {lhs}, right is {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("data format error at line {line}: {msg}")]
    DataFormat { line: usize, msg: String },

    #[error("sequence invariant violated: {0}")]
    InvariantViolation(String),

    #[error("missing prerequisite artifact: {what} (produce it with `{producer}`)")]
    MissingArtifact { what: String, producer: String },

    #[error("checkpoint/cache mismatch: {0}")]
    SchemaMismatch(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
