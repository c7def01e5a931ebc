//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("{op}: shape mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A forward op produced a NaN/Inf, or a gradient went non-finite.
    #[error("{context}: non-finite value at flat index {index}")]
    NonFinite { context: String, index: usize },

    /// Invalid configuration (validated before any expensive work).
    #[error("config: {0}")]
    Config(String),

    /// Numerical abort inside an optimization loop (with diagnostics).
    #[error("numerical abort: {0}")]
    Numerics(String),

    /// Malformed file contents (bad magic, version, truncation).
    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
