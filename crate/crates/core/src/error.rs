use thiserror::Error;

/// Failures raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (jitter cap {cap:e} exhausted)")]
    NotPositiveDefinite { cap: f64 },
    #[error("symmetric eigensolver did not converge")]
    NoConvergence,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("zero variance in output dimension {dim}")]
    ZeroVariance { dim: usize },
    #[error("hold-out set has no observed entries")]
    EmptyHoldout,
    #[error("training set is empty")]
    EmptyTraining,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, Error>;
