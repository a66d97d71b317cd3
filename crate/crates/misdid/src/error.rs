//! Crate-wide error type with CLI exit-code mapping.

use thiserror::Error;

/// Errors produced by ingestion, identification checks, optimization, and
/// estimation. Each variant maps to a stable process exit code so scripted
/// callers can dispatch on failure class.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data or configuration files (exit 2).
    #[error("ingestion error: {0}")]
    Ingestion(String),
    /// Identification failures such as a missing exclusion restriction (exit 3).
    #[error("identification error: {0}")]
    Identification(String),
    /// Optimizer failed to reach the gradient tolerance (exit 4).
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    /// Estimation failures: rank deficiency, overlap violations, degenerate
    /// cells (exit 5).
    #[error("estimation error: {0}")]
    Estimation(String),
    /// Too many bootstrap or Monte Carlo replicates failed (exit 6).
    #[error("replicate failure: {0}")]
    Replicates(String),
    /// Inputs outside a numerical routine's domain (exit 5).
    #[error("domain error: {0}")]
    Domain(String),
}

impl Error {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ingestion(_) => 2,
            Error::Identification(_) => 3,
            Error::NonConvergence(_) => 4,
            Error::Estimation(_) | Error::Domain(_) => 5,
            Error::Replicates(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
