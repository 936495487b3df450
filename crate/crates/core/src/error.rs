use thiserror::Error;

/// Errors raised by the numerical kernels and the training pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("rank infeasible: requested {rows} orthonormal rows in dimension {cols}")]
    RankInfeasible { rows: usize, cols: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn domain_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
