use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("vertex not present: {0}")]
    NotPresent(String),
    #[error("empty cluster: {0}")]
    EmptyCluster(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("sampling failed after retry cap: {0}")]
    SamplingFailure(String),
    #[error("unknown id: {0}")]
    UnknownId(String),
    #[error("invariant failure: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
