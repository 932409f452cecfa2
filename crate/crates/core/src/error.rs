use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum PcnError {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported configuration for {op}: {detail}")]
    Unsupported { op: &'static str, detail: String },

    #[error("degenerate batch for batch norm: {count} value(s) per channel, need at least 2")]
    DegenerateBatch { count: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {message} (byte offset {offset})")]
    Data {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFinite { param: String, step: u64 },
}

pub type Result<T> = std::result::Result<T, PcnError>;

impl PcnError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        PcnError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PcnError::Io {
            path: path.into(),
            source,
        }
    }
}
