use std::path::PathBuf;

use gues_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("expected {expected} channels, got {got}")]
    Channels { expected: usize, got: usize },

    #[error("pixel ({row}, {col}) outside {height}x{width} image")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {format} data: {detail}")]
    Format { format: &'static str, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite {what} at batch {batch}")]
    NonFinite { what: &'static str, batch: usize },

    #[error("batch of size {got} too small, need at least {need}")]
    BatchTooSmall { got: usize, need: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
