use std::io;

use thiserror::Error;

/// Errors raised anywhere in the counting pipeline.
#[derive(Debug, Error)]
pub enum SdcError {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("grid dimensions {h}x{w} must be divisible by {divisor}")]
    Indivisible { h: usize, w: usize, divisor: usize },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SdcError>;
