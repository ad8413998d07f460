//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid argument for {context}: {message}")]
    InvalidArgument { context: String, message: String },

    #[error("cca requires more samples than components: m={m} <= r={r}")]
    CcaTooFewSamples { m: usize, r: usize },

    #[error("covariance is numerically singular; raise the cca ridge (current {ridge})")]
    CcaSingularCovariance { ridge: f64 },

    #[error("zero-variance features passed to {context}")]
    ZeroVariance { context: String },

    #[error("layer {layer} is not a pq-lora layer")]
    NotPqLayer { layer: usize },

    #[error("empty {what}")]
    Empty { what: String },

    #[error("scenario config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn dims(context: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        Error::DimMismatch {
            context: context.into(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
