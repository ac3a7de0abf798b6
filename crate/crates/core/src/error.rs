use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A sample group is too small for the requested estimator.
    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("non-finite loss encountered ({term}); breakdown at abort: {breakdown:?}")]
    NonFiniteLoss {
        term: &'static str,
        breakdown: LossBreakdown,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ingestion error in {path}: {}", .problems.join("; "))]
    Ingestion { path: PathBuf, problems: Vec<String> },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
