//! Crate-wide error type and result alias.

use std::path::PathBuf;

/// Errors surfaced by tensor ops, model code, data generation and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible with the requested operation.
    #[error("{op}: shape error: {detail}")]
    Shape { op: String, detail: String },

    /// An operation produced or received values outside its numeric domain
    /// (non-finite results, log of a non-positive value, zero-norm inputs).
    #[error("{op}: domain error: {detail}")]
    Domain { op: String, detail: String },

    /// An API contract was violated by the caller (empty batch, unknown
    /// parameter name, inconsistent label matrix, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration file failed validation; `path` points at the offending
    /// field (dotted notation, e.g. `genfilt.threshold`).
    #[error("config: {path}: {detail}")]
    Config { path: String, detail: String },

    /// A required input file or directory does not exist.
    #[error("missing input: {}", path.display())]
    MissingInput { path: PathBuf },

    /// Filesystem failure with the path that triggered it.
    #[error("io: {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed JSON in a config or data file.
    #[error("json: {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Checkpoint container is malformed or does not match expectations.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A feature-generator adapter failed or returned an invalid response.
    #[error("adapter: {0}")]
    Adapter(String),
}

impl Error {
    /// Shorthand used by tensor ops.
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape { op: op.to_string(), detail: detail.into() }
    }

    /// Shorthand used by tensor ops.
    pub fn domain(op: &str, detail: impl Into<String>) -> Self {
        Error::Domain { op: op.to_string(), detail: detail.into() }
    }

    /// Shorthand for caller-contract violations.
    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    /// Shorthand for config validation failures.
    pub fn config(path: &str, detail: impl Into<String>) -> Self {
        Error::Config { path: path.to_string(), detail: detail.into() }
    }

    /// Wraps an io error with its path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Shorthand for feature-generator adapter failures.
    pub fn adapter(detail: impl Into<String>) -> Self {
        Error::Adapter(detail.into())
    }

    /// Process exit code for the CLI: 2 for config errors, 3 for missing
    /// inputs, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json { .. } => 2,
            Error::MissingInput { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
