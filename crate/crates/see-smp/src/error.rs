//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeeError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("solution blew up (NaN or Inf) at step {step}: {context}")]
    Blowup { step: usize, context: String },

    #[error("fixed point did not contract within {iterations} sweeps (last ratio {ratio})")]
    NonContraction { iterations: usize, ratio: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("enumeration cap exceeded: {requested} candidate controls > cap {cap}")]
    EnumerationCap { requested: usize, cap: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SeeError>;

impl SeeError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        SeeError::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        SeeError::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        SeeError::Numerical(msg.into())
    }
}
