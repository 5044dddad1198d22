use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = LtdError> = std::result::Result<T, E>;

/// Failures while reading or validating a weight archive.
#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("bad magic: expected LTDW0001")]
    BadMagic,
    #[error("archive truncated: {0}")]
    Truncated(String),
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("unsupported dtype {dtype:?} for tensor {name}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite weight in tensor {0}")]
    NonFinite(String),
}

#[derive(Debug, Error)]
pub enum LtdError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("codec error: {0}")]
    Codec(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged {
        epoch: usize,
        reason: String,
        last_good: Box<Checkpoint>,
    },
}

impl LtdError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        LtdError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation/config, 2 IO, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LtdError::Io { .. } => 2,
            LtdError::Numeric(_) | LtdError::Diverged { .. } => 3,
            _ => 1,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(LtdError::Dimension(msg.into()))
}
