use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite state at step {step} of trajectory {trajectory}")]
    NumericalBlowup { trajectory: u64, step: u64 },

    #[error("operation not supported: {0}")]
    Unsupported(&'static str),

    #[error("trajectory was truncated before reaching the target set")]
    TruncatedSample,

    #[error("estimation failed: {0}")]
    EstimationFailed(String),

    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),

    #[error("linear solver failed: {0}")]
    Solver(String),

    #[error("maximum principle violated at node {node} (value {value}); grid spacing is probably too coarse")]
    MaximumPrinciple { node: usize, value: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
