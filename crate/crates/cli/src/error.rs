use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mfrnn::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{what}: {path}: {source}")]
    Io {
        what: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },

    /// A single run stopped on a non-finite state.
    #[error("numeric abort at step {step}; last snapshot: {}", .last_snapshot.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    NumericAbort {
        step: usize,
        last_snapshot: Option<PathBuf>,
    },

    /// Some runs of a batch failed; outputs of the others were written.
    #[error("{failed} of {total} runs failed; see {summary}")]
    Partial {
        failed: usize,
        total: usize,
        summary: PathBuf,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NumericAbort { .. } | CliError::Core(mfrnn::Error::NumericAbort { .. }) => 2,
            CliError::Partial { .. } => 3,
            _ => 1,
        }
    }

    pub fn io(
        what: &'static str,
        path: impl Into<PathBuf>,
    ) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { what, path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
