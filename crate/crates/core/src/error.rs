use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: &'static str, msg: String },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training error: {0}")]
    Training(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("augmentation error: {0}")]
    Augmentation(String),

    #[error("tokenization error: {0}")]
    Tokenization(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{path}: {msg}")]
    Table { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn table(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Table {
            path: path.into(),
            msg: msg.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
