use thiserror::Error;

/// Errors raised by the tomography toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not Hermitian (defect {0:e})")]
    NotHermitian(f64),

    #[error("trace deviates from 1 (got {0})")]
    InvalidTrace(f64),

    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPositive(f64),

    #[error("coherent-state tail mass {tail:e} beyond dimension {dim} is too large")]
    TruncationTail { dim: usize, tail: f64 },

    #[error("trace drifted by {0:e} in a single integration step")]
    TraceDrift(f64),

    #[error("root finding did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("matrix is singular or rank deficient: {0}")]
    Singular(String),

    #[error("matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),

    #[error("map has imaginary residue {0:e}")]
    ImaginaryResidue(f64),

    #[error("sampler acceptance rate {0:.3} outside the admissible window")]
    PoorMixing(f64),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
