use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("antenna index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("degenerate geometry: radicand {radicand} is not positive for (n1={n1}, n2={n2})")]
    DegenerateGeometry { n1: usize, n2: usize, radicand: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("layout error: {0}")]
    Layout(String),

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },

    #[error("{path} already exists (use --force to overwrite)")]
    Exists { path: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
