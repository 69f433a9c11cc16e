use std::io;

use thiserror::Error;

pub type Result<T, E = DivaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DivaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate vector: norm {norm:e} is below {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("value outside domain: {0}")]
    Domain(String),

    #[error("invalid batch spec: {0}")]
    BatchSpec(String),

    #[error("mining failed: {0}")]
    Mining(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("incompatible input: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DivaError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        DivaError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DivaError::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        DivaError::Format { offset, msg: msg.into() }
    }
}
