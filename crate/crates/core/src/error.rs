use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Diff(#[from] diffkit::DiffError),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("truncated input at byte {offset}: {missing} more bytes needed")]
    Truncated { offset: usize, missing: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: String, detail: String },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
