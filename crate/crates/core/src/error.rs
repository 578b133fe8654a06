use std::io;

use thiserror::Error;

/// Errors produced by the quantization engine.
#[derive(Debug, Error)]
pub enum QbitError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} at index {index} is outside [0, 1]")]
    RangeViolation { index: usize, value: f64 },

    #[error("corrupted code data: {0}")]
    Corruption(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("numeric failure in layer {layer}: {detail}")]
    NumericFailure { layer: usize, detail: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("config error at line {line}, field `{field}`: {message}")]
    Config {
        line: usize,
        field: String,
        message: String,
    },

    #[error("dataset error in {path} at byte {offset}: {message}")]
    Dataset {
        path: String,
        offset: u64,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, QbitError>;

pub(crate) fn invalid(msg: impl Into<String>) -> QbitError {
    QbitError::InvalidArgument(msg.into())
}
