use std::path::PathBuf;

use crate::model::PlaceId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("token index {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("{path}: line {line}: expected {expected} values, found {found}")]
    Dimension {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("layer `{layer}`: weight blob length mismatch ({message})")]
    BlobLength { layer: String, message: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("missing calibrated range for activation place `{0}`")]
    MissingRange(PlaceId),

    #[error("missing bit width for place `{0}`")]
    MissingPlace(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path} already exists (pass force to overwrite)")]
    AlreadyExists { path: PathBuf },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
