use thiserror::Error;

/// Errors raised by geometry kernels, problem oracles and solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("point is not on the manifold: {0}")]
    NotOnManifold(String),

    #[error("vector is not tangent: {0}")]
    NotTangent(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("numerical domain error: {0}")]
    NumericalDomain(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
