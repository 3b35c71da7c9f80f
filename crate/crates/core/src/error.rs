use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no finite entry (every position masked)")]
    InvalidRow { row: usize },

    #[error("index {index} out of range for extent {extent}")]
    Index { index: usize, extent: usize },

    #[error("tape lifecycle: {0}")]
    Lifecycle(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("format: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("aggregation: {0}")]
    Aggregation(String),

    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors the CLI reports as configuration/validation failures.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Json(_) | Error::Format(_) | Error::Aggregation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
