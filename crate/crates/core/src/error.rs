use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pretrain / evaluate pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error: missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("format error in {}: row {row}: {reason}", .path.display())]
    Format {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("zero variance in sample {index}")]
    ZeroVariance { index: usize },

    #[error("zero-norm embedding at row {index}")]
    ZeroNorm { index: usize },

    #[error("class {class} has no samples in the fine-tuning split")]
    ClassStarvation { class: usize },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch}: nt_xent={nt_xent}, correlation={correlation}"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        nt_xent: f64,
        correlation: f64,
    },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
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

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
