use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented contract (bad shapes, ids, ranges, config values).
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("cache was produced by a different parameter generation")]
    StaleCache,

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("time limit of {0:.1}s exceeded")]
    TimeLimit(f64),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors caused by bad input rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Parse { .. }
                | Error::DimensionMismatch { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
