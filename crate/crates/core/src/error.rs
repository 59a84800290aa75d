//! Error type shared by every module in the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    Shape { op: &'static str, detail: String },
    /// An operation produced NaN or Inf; tensors must stay finite.
    NonFinite { op: &'static str },
    /// Backward was called twice on the same recording.
    GraphConsumed,
    /// Backward requires a scalar output node.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// A parameter is outside its documented domain.
    InvalidArg(String),
    /// Training loss left the finite range.
    Divergence { seed: u64, step: u64 },
    /// A serialized artifact is malformed.
    Format(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::GraphConsumed => write!(f, "graph already consumed by backward; re-record before differentiating again"),
            Error::NotScalar { op, shape } => write!(f, "{op} requires a scalar node, got shape {shape:?}"),
            Error::InvalidArg(msg) => write!(f, "invalid argument: {msg}"),
            Error::Divergence { seed, step } => write!(f, "training diverged (non-finite loss) at seed {seed}, step {step}"),
            Error::Format(msg) => write!(f, "malformed artifact: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
