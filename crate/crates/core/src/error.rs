//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model math, matching, metrics and generators.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths of the inputs do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Values outside the mathematical domain of the operation
    /// (non-finite entries, non-positive thresholds, out-of-range
    /// quantiles, non-bijective maps, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The operation is invalid for the object's current state,
    /// e.g. folding an already-folded SAE.
    #[error("state error: {0}")]
    State(String),

    /// Input exceeds a hard size limit (exhaustive solver).
    #[error("size limit exceeded: {0}")]
    SizeLimit(String),

    /// Batch kind does not match what the operation expects.
    #[error("batch kind mismatch: {0}")]
    KindMismatch(String),

    /// Input is degenerate for the requested statistic
    /// (fewer than two tokens, zero variance).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// No feature pair had any source activation.
    #[error("no active source features: matching score undefined")]
    NoActivations,

    /// Malformed or inconsistent file content.
    #[error("format error: {0}")]
    Format(#[from] FormatError),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// File-format violations detected while reading SAEM containers or
/// permutation documents. Each malformation maps to a distinct kind so
/// callers can tell corrupt bytes from wrong shapes.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic (expected \"SAEM\")")]
    BadMagic,

    #[error("unsupported version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("missing required tensor \"{0}\"")]
    MissingTensor(String),

    #[error("unexpected tensor \"{0}\" for this container kind")]
    UnexpectedTensor(String),

    #[error("tensor \"{name}\" out of bounds: offset {offset} + {nbytes} bytes exceeds payload of {payload} bytes")]
    OutOfBounds {
        name: String,
        offset: u64,
        nbytes: u64,
        payload: u64,
    },

    #[error("tensors \"{0}\" and \"{1}\" overlap")]
    Overlap(String, String),

    #[error("shape inconsistency: {0}")]
    Shape(String),

    #[error("non-positive theta component in unfolded SAE")]
    NonPositiveTheta,

    #[error("malformed permutation document: {0}")]
    MalformedPermutation(String),

    #[error("malformed document: {0}")]
    MalformedDocument(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}
