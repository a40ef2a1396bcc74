use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received operands whose shapes do not fit together.
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: {message}")]
    InvalidArgument { op: &'static str, message: String },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("variable belongs to tape {found}, expected tape {expected}")]
    CrossTape { expected: u64, found: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported or malformed image file {path}: {message}")]
    ImageFormat { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint was written for a different model configuration: {0}")]
    ConfigMismatch(String),

    #[error("non-finite loss at iteration {iteration} (lr {lr:e}); gradient norms: {grad_norms}")]
    NonFiniteLoss {
        iteration: usize,
        lr: f64,
        grad_norms: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Process exit status for configuration problems.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit status for unreadable or inconsistent data and files.
pub const EXIT_DATA: i32 = 3;
/// Process exit status for numeric failures.
pub const EXIT_NUMERIC: i32 = 4;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::ConfigMismatch(_)
            | Error::Shape { .. }
            | Error::InvalidArgument { .. }
            | Error::CrossTape { .. } => EXIT_CONFIG,
            Error::Data(_) | Error::ImageFormat { .. } | Error::Checkpoint { .. } | Error::Io(_) => EXIT_DATA,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        }
    }

    pub(crate) fn invalid(op: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            op,
            dim,
            expected,
            actual,
        }
    }
}
