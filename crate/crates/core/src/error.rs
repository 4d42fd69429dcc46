use thiserror::Error;

/// Errors raised across model fitting, planning, optimization and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite even after jitter levels {jitters:?}")]
    IllConditioned { jitters: Vec<f64> },

    #[error("belief diverged at step {step}: covariance trace {trace:e} exceeds {bound:e}")]
    Divergence { step: usize, trace: f64, bound: f64 },

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("optimization failed: {0}")]
    OptimizationFailed(String),

    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("experiment failed after {completed_episodes} episodes: {source}")]
    Experiment {
        completed_episodes: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
