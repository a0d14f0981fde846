use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("expected a unit vector, measured norm {norm}")]
    NotUnitVector { norm: f32 },

    #[error("activations do not belong to the current network state ({0})")]
    StaleActivations(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Failures while reading IDX image/label files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic number, expected {expected:#010x}, found {actual:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("{path}: truncated, header needs {expected} bytes but file has {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: unsupported image dimensions {rows}x{cols} (expected 28x28)")]
    BadDimensions { path: PathBuf, rows: u32, cols: u32 },

    #[error("image file declares {images} items but label file declares {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("{path}: label {label} at index {index} is out of range 0..=9")]
    BadLabel {
        path: PathBuf,
        index: usize,
        label: u8,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a RECOS1 checkpoint (magic {0:?})")]
    BadMagic(Vec<u8>),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}
