use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("buffer overflow in {buffer}: {needed} entries needed, capacity {capacity}")]
    BufferOverflow {
        buffer: &'static str,
        needed: u64,
        capacity: u64,
    },

    #[error("schedule conflict: {0}")]
    ScheduleConflict(String),

    #[error("softmax row is empty")]
    EmptySoftmaxRow,

    #[error("single-load audit failed: {0}")]
    AuditFailed(String),

    #[error("weights: {0}")]
    Weights(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
