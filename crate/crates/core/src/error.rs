use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or unsupported file contents.
    #[error("format error: {0}")]
    Format(String),
    /// Operands whose dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// NaN/Inf or other numerical breakdown.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A parameter outside its valid domain.
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    /// Prefix a format error with the file it came from.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            Error::Shape(msg) => Error::Shape(format!("{}: {msg}", path.display())),
            other => other,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
