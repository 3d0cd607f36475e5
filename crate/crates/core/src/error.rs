use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto exit codes
/// (config -> 2, data -> 3, everything else -> 4).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that must agree do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A caller broke an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An index (e.g. a class label) is outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Input is mathematically degenerate for the requested operation
    /// (zero-variance activations, identical rows for an RBF kernel, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A dataset file is missing, truncated, or malformed.
    #[error("ingestion failed for {path:?}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    /// Bad experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn degenerate(msg: impl Into<String>) -> Self {
        Error::Degenerate(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
