use std::path::PathBuf;

use thiserror::Error;

use crate::data::{ChunkId, OwnershipPhase, WorkerId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: u64, reason: String },
    #[error("ownership contract violated: {operation} is not permitted while {phase:?}")]
    ContractViolation {
        operation: &'static str,
        phase: OwnershipPhase,
    },
    #[error("invalid move of chunk {chunk}: {reason}")]
    InvalidMove { chunk: ChunkId, reason: String },
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error("unknown chunk {0}")]
    UnknownChunk(ChunkId),
    #[error("chunk {0} has no dual state")]
    StateMissing(ChunkId),
    #[error("batch size {batch} exceeds local sample count {available}")]
    InsufficientSamples { batch: usize, available: usize },
    #[error("no samples were processed in this iteration")]
    NoWork,
    #[error("iteration {iteration} failed: {reason}")]
    IterationFailed { iteration: u64, reason: String },
    #[error("worker {0} has no runtime history")]
    NoHistory(WorkerId),
    #[error("removing these workers would leave none")]
    NoWorkersLeft,
    #[error("unknown node {0}")]
    UnknownNode(WorkerId),
    #[error("worker {0} is unavailable")]
    WorkerUnavailable(WorkerId),
    #[error("instance too large for exhaustive search: {tasks} tasks on {nodes} nodes")]
    TooLarge { tasks: usize, nodes: usize },
    #[error("invalid hyper-parameters: {0}")]
    InvalidHyperParams(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
