use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("failed to load {path}: {field}: {reason}")]
    Load {
        path: PathBuf,
        field: String,
        reason: String,
    },

    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at {stage}: loss = {loss}")]
    TrainingDiverged { stage: String, loss: f64 },

    #[error("PEPITA supports at most 3 hidden layers, got {0}")]
    UnsupportedDepth(usize),

    #[error("network has no {0}")]
    MissingHeads(&'static str),

    #[error("network has no confidence gates for {0}")]
    MissingGates(&'static str),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("invalid exit distribution: {0}")]
    InvalidDistribution(String),

    #[error("model file error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
