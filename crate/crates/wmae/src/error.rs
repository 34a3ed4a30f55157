//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum WmaeError {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A stored file does not match its declared format.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint is incompatible with the requested use.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// API misuse (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl WmaeError {
    /// Stable machine-parsable category name, used by the CLI for exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            WmaeError::ShapeMismatch { .. } => "shape",
            WmaeError::Config(_) => "config",
            WmaeError::NonFinite(_) => "nonfinite",
            WmaeError::Format(_) => "format",
            WmaeError::Checkpoint(_) => "checkpoint",
            WmaeError::Usage(_) => "usage",
            WmaeError::Io { .. } => "io",
            WmaeError::Json { .. } => "json",
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        WmaeError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        WmaeError::Json {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, WmaeError>;
