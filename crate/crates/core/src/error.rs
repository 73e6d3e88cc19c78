//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single tensor has the wrong shape for an operation.
    #[error("{op}: unsupported shape {shape:?} ({detail})")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// An index (class label, row, layer) is out of range.
    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    /// A caller violated an operation contract (non-scalar loss, bad
    /// probability, gate-length mismatch, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Inconsistent configuration (architecture mismatch, missing
    /// checkpoint, invalid field values).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation produced a NaN or infinity.
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    /// A checkpoint or dataset container failed validation.
    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
}
