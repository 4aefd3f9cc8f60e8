use std::io;

use thiserror::Error;

pub type Result<T, E = MemrlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MemrlError {
    #[error("invalid dimension: expected {expected}, got {actual}")]
    InvalidDimension { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory {0} not found")]
    NotFound(u64),

    #[error("candidate pool is empty")]
    EmptyPool,

    #[error("persistence error: {0}")]
    Persistence(#[from] io::Error),

    #[error("corrupt record at byte offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("remote embedding failed: {0}")]
    RemoteEmbedding(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl MemrlError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MemrlError::InvalidArgument(msg.into())
    }
}
