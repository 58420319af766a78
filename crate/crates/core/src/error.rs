use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, dimension mismatch or malformed parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A point handed to a map lies outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was called with inputs that violate its contract.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Combinatorial cost guard of a brute-force reference routine.
    #[error("guard limit exceeded: {0}")]
    Guard(String),

    /// A non-finite value appeared in a forward or backward recursion.
    /// `index` is the unroll depth k at which it was detected.
    #[error("non-finite value in {stage} at depth {index}")]
    Numeric { stage: &'static str, index: usize },

    /// Training hit a non-finite state and stopped.
    #[error("numeric abort at step {step}; last snapshot: {}", fmt_path(.last_snapshot))]
    NumericAbort {
        step: usize,
        last_snapshot: Option<PathBuf>,
    },

    /// Binary or text container could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn fmt_path(p: &Option<PathBuf>) -> String {
    match p {
        Some(p) => p.display().to_string(),
        None => "none".to_string(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
