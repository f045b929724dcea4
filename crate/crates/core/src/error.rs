use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("store at {path} exists but cannot be parsed: {reason}")]
    CorruptStore { path: PathBuf, reason: String },

    #[error("timed out after {waited_ms} ms waiting for lock on {path}")]
    LockTimeout { path: PathBuf, waited_ms: u128 },

    #[error("no files matched the ingest globs under {0}")]
    EmptyRepo(PathBuf),

    #[error("card {card_id} is stale: {relpath} changed since ingest")]
    StaleCard { card_id: String, relpath: String },

    #[error("unknown file {0}")]
    UnknownFile(String),

    #[error("span [{cs}, {ce}) is out of range for {relpath} (length {byte_len})")]
    OutOfRange {
        relpath: String,
        cs: u64,
        ce: u64,
        byte_len: u64,
    },

    #[error("update targets graph {update} but was applied to {graph}")]
    TargetMismatch { graph: String, update: String },

    #[error("unknown node(s): {}", .0.join(", "))]
    UnknownNode(Vec<String>),

    #[error("unknown graph {0}")]
    UnknownGraph(String),

    #[error("card(s) missing from card store: {}", .0.join(", "))]
    MissingCard(Vec<String>),

    #[error("unknown hypothesis {0}")]
    UnknownHypothesis(String),

    #[error("hypothesis {0} has a final verdict and cannot be modified")]
    Finalized(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("value {value} is outside [0, 1]")]
    Range { value: f64 },

    #[error("coverage universe is empty (nodes={nodes}, cards={cards})")]
    EmptyUniverse { nodes: usize, cards: usize },

    #[error("prompt of ~{estimated} tokens exceeds context limit {limit}")]
    ContextOverflow { estimated: usize, limit: usize },

    #[error("provider output for {schema} failed validation after {attempts} attempt(s): {reason}")]
    ProviderSchema {
        schema: String,
        attempts: usize,
        reason: String,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("mock script expected {expected} but {requested} was requested")]
    ScriptMismatch { expected: String, requested: String },

    #[error("invalid action: {0}")]
    InvalidAction(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
