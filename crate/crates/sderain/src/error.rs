//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with inputs that violate its contract
    /// (shape mismatch, non-scalar loss, undersized image, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A gradient or loss value left the finite range.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// PNM (PGM/PPM) parsing failed; `offset` is the byte position in the file.
    #[error("PNM parse error at byte {offset}: {message}")]
    PnmParse { offset: usize, message: String },

    /// Model container parsing failed (bad magic, version, truncation, ...).
    #[error("model format error: {0}")]
    ModelFormat(String),

    /// A training/eval dataset is missing, empty, or inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A configuration field is missing or out of range.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn dataset(msg: impl Into<String>) -> Self {
        Error::Dataset(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
