use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

/// Binary container decoding failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("declared dimensions {0} x {1} overflow")]
    DimensionOverflow(u32, u32),
    #[error("malformed data: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("config error: {0}")]
    Config(String),
    #[error("segment too short: {frames} frames, need at least 4")]
    TooShort { frames: usize },
    #[error("incompatible model image: {0}")]
    Incompatible(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
