use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] specssl::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 3 for failures during training, 2 for everything the user can fix by
    /// changing flags, files or paths.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(specssl::Error::Training(_) | specssl::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
