use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or extents are incompatible.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller violated an operation precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward op produced NaN or infinity.
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    /// Non-finite gradient reached the optimizer.
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    /// Malformed file content; `at` locates the problem (byte offset or line).
    #[error("format error in {path}: {msg} ({at})", path = .path.display())]
    Format {
        path: PathBuf,
        at: String,
        msg: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("i/o error on {path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format_at_byte(path: impl Into<PathBuf>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            at: format!("byte offset {offset}"),
            msg: msg.into(),
        }
    }

    pub(crate) fn format_at_line(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            at: format!("line {line}"),
            msg: msg.into(),
        }
    }
}
