//! Error type shared by every module of the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training error at {location}: {message}")]
    Training { location: String, message: String },

    #[error("numerical error in layer {layer}: {message}")]
    Numerical { layer: usize, message: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("generation setup error: {0}")]
    Setup(String),

    #[error("unsupported bundle version `{found}` (expected `{expected}`)")]
    VersionMismatch { found: String, expected: String },

    #[error("bundle file is truncated: {0}")]
    Truncated(String),

    #[error("bundle checksum mismatch (stored {stored}, computed {computed})")]
    ChecksumMismatch { stored: String, computed: String },

    #[error("malformed bundle: {0}")]
    Malformed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn training(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Training {
            location: location.into(),
            message: message.into(),
        }
    }
}
