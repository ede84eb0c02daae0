use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum KmcError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("step size violates t*sqrt(L) <= 1/4 (t*sqrt(L) = {value:.6})")]
    StepTooLarge { value: f64 },

    #[error("operation requires a Hessian, which this potential does not provide")]
    MissingHessian,

    #[error("integrator tolerance not reached within {budget} substeps")]
    ToleranceNotReached { budget: usize },

    #[error("Newton solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonFailed { iterations: usize, residual: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical assertion failed: {0}")]
    Assertion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, KmcError>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(KmcError::DimensionMismatch { expected, got });
    }
    Ok(())
}
