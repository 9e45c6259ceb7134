use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("input is empty")]
    Empty,

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("count at index {index} is invalid ({value}); counts must be finite and non-negative")]
    InvalidCount { index: usize, value: f64 },

    #[error("weight at index {index} is invalid ({value}); weights must be finite and strictly positive")]
    InvalidWeight { index: usize, value: f64 },

    #[error("total count is zero")]
    ZeroTotal,

    #[error("column {column} has zero total count")]
    ZeroColumn { column: usize },

    #[error("smoothing parameter must be finite and positive, got {0}")]
    InvalidLambda(f64),

    #[error("invalid composition: {0}")]
    InvalidComposition(String),

    #[error("log density is not centered: sum = {0:e}")]
    NotCentered(f64),

    #[error("Newton iteration did not converge at lambda = {lambda:e} after {iterations} iterations (gradient sup-norm {gradient_norm:e})")]
    NotConverged {
        lambda: f64,
        iterations: usize,
        gradient_norm: f64,
    },

    #[error("Hessian factorization failed at lambda = {0:e}")]
    Factorization(f64),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("every grid point failed to fit; last error: {0}")]
    AllGridPointsFailed(Box<Error>),

    #[error("cell index {index} out of range for {len} cells")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("column {column}: {source}")]
    Column {
        column: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// True for solver failures (as opposed to invalid input).
    pub fn is_convergence_failure(&self) -> bool {
        match self {
            Error::NotConverged { .. } | Error::Factorization(_) => true,
            Error::AllGridPointsFailed(inner) => inner.is_convergence_failure(),
            Error::Column { source, .. } => source.is_convergence_failure(),
            _ => false,
        }
    }
}
