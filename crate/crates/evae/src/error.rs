//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// A precondition on arguments was violated (shapes, ranges, enums).
    InvalidArgument(String),
    /// A computation produced or received non-finite values.
    Numerical(String),
    /// A checkpoint or run config does not match what an artifact was built with.
    ConfigMismatch(String),
    /// Filesystem or serialization failure, with the offending path when known.
    Io(String),
}

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config_mismatch(msg: impl Into<String>) -> Self {
        Error::ConfigMismatch(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    pub fn shape_mismatch(a: &[usize], b: &[usize]) -> Self {
        Error::InvalidArgument(format!("shape mismatch: {a:?} vs {b:?}"))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
            Error::ConfigMismatch(m) => write!(f, "config mismatch: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
