use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the linkage and estimation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("field count mismatch: expected {expected}, found {found}")]
    FieldCount { expected: usize, found: usize },

    #[error("comparison matrix of {cells} cells exceeds the cap of {cap}")]
    TooLarge { cells: usize, cap: usize },

    #[error("design matrix is rank deficient")]
    RankDeficient,

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// failures while running an otherwise valid job.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::FieldCount { .. }
                | Error::TooLarge { .. }
                | Error::Parse { .. }
                | Error::Csv { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
