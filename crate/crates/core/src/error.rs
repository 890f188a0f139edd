use thiserror::Error;

use crate::trainer::TrainReport;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("degenerate group: {0}")]
    DegenerateGroup(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("invalid spec: {0}")]
    Spec(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in record {id:?}: {message}")]
    Format { id: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted at iteration {iteration}: {reason}")]
    TrainingAborted {
        iteration: usize,
        reason: String,
        report: Box<TrainReport>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
