//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the relation detection pipeline.
#[derive(Debug, Error)]
pub enum VrdError {
    /// Bad or missing configuration (lexicon files, rule tables, dimensions).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated a documented operation contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input data; carries a 1-based line number when known.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A target relationship has fewer instances than the requested shot count.
    #[error("relationship '{relation}' has {available} instances, {required} required")]
    InsufficientInstances {
        relation: String,
        available: usize,
        required: usize,
    },

    /// Training produced a non-finite loss.
    #[error("non-finite loss at {context}")]
    Diverged { context: String },

    /// Checkpoint or data file with a bad magic header or layout.
    #[error("invalid file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VrdError>;
