//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up. `context` names the operation or node.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// A scalar or structural argument is out of its documented domain.
    #[error("invalid parameter {name}: {reason}")]
    Param { name: String, reason: String },

    /// API misuse, e.g. backward before forward.
    #[error("invalid call sequence: {0}")]
    State(String),

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Bad run configuration (unknown key, unparsable value, invalid combination).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed serialized data (image, manifest, checkpoint).
    #[error("format error in {what} at byte {offset}: {reason}")]
    Format {
        what: String,
        offset: usize,
        reason: String,
    },

    /// Filesystem failure, tagged with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Failure tied to one dataset sample.
    #[error("sample {id}: {reason}")]
    Sample { id: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Param {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
