use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration or missing inputs; exit code 2.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] auvire_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 is success, 1 a runtime failure, 2 a usage or configuration error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(auvire_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
