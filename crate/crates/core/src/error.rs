use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the motion-correction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument is out of its valid domain (non-finite, negative...).
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Inputs violate a shape or indexing contract between components.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A configuration value is unusable for the requested operation.
    #[error("configuration error: {0}")]
    Configuration(String),
    /// Optimization produced a non-finite value.
    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },
    /// A checkpoint, volume or array file is malformed or incompatible.
    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }
}
