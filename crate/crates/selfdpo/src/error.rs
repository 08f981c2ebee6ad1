//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the curation pipeline, the numeric core, and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A line in a JSONL file failed to parse or violated its schema.
    #[error("{path}:{line}: {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("duplicate task_id `{0}`")]
    DuplicateTaskId(String),
    #[error("invalid attribute spec: {0}")]
    InvalidSpec(String),
    #[error("invalid task `{task_id}`: {msg}")]
    InvalidTask { task_id: String, msg: String },
    #[error("invalid preference pair for task `{task_id}`: {msg}")]
    InvalidPair { task_id: String, msg: String },
    #[error("consensus requires at least one chain")]
    EmptyChains,
    #[error("chains span multiple task ids: `{0}` and `{1}`")]
    MixedTaskIds(String, String),
    #[error("task `{0}` has an empty preferred set")]
    EmptyPreferredSet(String),
    #[error("empty pair list")]
    EmptyPairs,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("endpoint error for task `{task_id}`: {msg}")]
    Endpoint { task_id: String, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data, 3 endpoint.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Endpoint { .. } => 3,
            _ => 2,
        }
    }
}
