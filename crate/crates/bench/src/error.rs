use hicr_core::HicrError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Core(#[from] HicrError),
    #[error(transparent)]
    Frontend(#[from] hicr_frontends::Error),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("echo of {size}-byte message differs at byte {offset} in repetition {rep}")]
    VerificationFailure { size: u64, rep: usize, offset: usize },
    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),
    #[error("result mismatch between instances: {0}")]
    InconsistentResults(String),
    #[error("{0}")]
    TaskFailed(String),
    #[error("could not start {0}")]
    SpawnFailure(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
