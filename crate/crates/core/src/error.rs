use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the library. The CLI maps these onto exit codes via
/// [`Error::is_validation`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: non-finite loss (last finite checkpoint: {checkpoint:?})")]
    Diverged {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    /// Errors caused by bad inputs rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Parse { .. } | Error::Validation(_) | Error::Shape(_) | Error::Config(_) => {
                true
            }
            Error::Diverged { .. } | Error::Runtime(_) => false,
        }
    }
}
