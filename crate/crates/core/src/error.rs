use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no valid pixels: {0}")]
    Empty(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {kind} in {path}: {msg}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            msg: msg.into(),
        }
    }
}
