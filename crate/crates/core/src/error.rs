use std::path::PathBuf;

/// Errors raised by the safety-layer toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A vector or matrix had the wrong dimension for the operation.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A scalar parameter was outside its admissible range.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// A non-finite value was found where a finite one is required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// A run or environment configuration failed validation.
    #[error("configuration error at `{key}`: {reason}")]
    Config { key: String, reason: String },

    /// An invariant that the implementation itself guarantees was violated.
    #[error("internal consistency check failed: {0}")]
    Internal(String),

    /// Not enough data to perform the requested update.
    #[error("replay buffer holds {available} transitions, {required} required")]
    NotReady { available: usize, required: usize },

    /// A loss or gradient turned non-finite during training.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed persisted data (checkpoint, trace file).
    #[error("failed to parse {what}: {reason}")]
    Parse { what: &'static str, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
