use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    Dimension {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("view selection failed: {0}")]
    Selection(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        Error::Dimension {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
