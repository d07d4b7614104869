//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by dataset construction, training, diagnostics, and IO.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value failed validation before any work started.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The requested modulus is not prime.
    #[error("modulus {0} is not prime; tasks require a prime modulus")]
    NotPrime(u64),

    /// Tensor shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A non-finite value appeared where finite arithmetic was required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A binary file failed to parse; `offset` is the byte position of the
    /// first inconsistency.
    #[error("corrupt file {path} at byte offset {offset}: {what}")]
    CorruptFile {
        path: PathBuf,
        offset: u64,
        what: String,
    },

    /// A text file (dataset export, config file) failed to parse.
    #[error("parse error in {path} line {line}: {what}")]
    ParseError {
        path: PathBuf,
        line: usize,
        what: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error is a misconfiguration the user can fix by
    /// changing flags, as opposed to a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::InvalidConfig(_) | Error::NotPrime(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
