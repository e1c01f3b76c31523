use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EdmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EdmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for extent {bound} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("image dimensions {height}x{width} are not multiples of 32; pad the input to the next multiple of 32")]
    NotPadded { height: usize, width: usize },

    #[error("singular or degenerate homography")]
    SingularHomography,

    #[error("malformed PGM {path}: {detail}")]
    Pgm { path: PathBuf, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl EdmError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        EdmError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        EdmError::Invalid {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EdmError::Io {
            path: path.into(),
            source,
        }
    }
}
