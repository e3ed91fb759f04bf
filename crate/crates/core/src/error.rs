use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} is not positive definite (tried jitter up to {max_jitter:e})")]
    NotPositiveDefinite { what: String, max_jitter: f64 },

    #[error("integration diverged after t = {last_time}")]
    Divergence { last_time: f64 },

    #[error("integration exceeded the budget of {max_steps} steps at t = {last_time}")]
    StepBudget { max_steps: usize, last_time: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("objective is not finite at the starting point")]
    NonFiniteStart,

    #[error("fit failed: all {restarts} restarts failed")]
    FitFailed { restarts: usize },

    #[error("lengthscale selection failed: no candidate could be fitted")]
    SelectionFailed,

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("unsupported model format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
