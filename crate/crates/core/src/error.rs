use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),

    #[error("invalid label value {value} at flat index {index}")]
    InvalidLabel { index: usize, value: f32 },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid markers: {0}")]
    Markers(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
