//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Top-level error for every fallible operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller violated an operation's precondition (shape mismatch,
    /// out-of-range level, empty chain, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A file could not be parsed as the expected interchange format.
    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            kind,
        }
    }
}

/// Distinct parse-failure classes for the interchange formats.
#[derive(Debug, PartialEq, Eq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at offset {0}")]
    NonFinite(usize),

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

/// Convenience macro: bail with a contract violation.
macro_rules! contract {
    ($cond:expr, $($arg:tt)*) => {
        if !($cond) {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use contract;
