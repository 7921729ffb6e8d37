use std::path::PathBuf;

/// Errors raised across the toolkit. Variants are grouped by the failing stage so the CLI can
/// map them onto exit categories.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpec(String),
    #[error("invalid architecture config: {0}")]
    InvalidConfig(String),
    #[error("malformed one-hot encoding: {0}")]
    Decode(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("remap infeasible: {0}")]
    Remap(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("embedding degenerate: {0}")]
    Embedding(String),
    #[error("adaptation failed: {0}")]
    Adaptation(String),
    #[error("invalid distillation setup: {0}")]
    Distill(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("task database line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("dangling checkpoint reference {0}")]
    DanglingCheckpoint(PathBuf),
    #[error("checkpoint archive: {0}")]
    Archive(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("search: {0}")]
    Search(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
