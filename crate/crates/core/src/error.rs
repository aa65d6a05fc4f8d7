use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("missing split file {0}")]
    MissingSplit(PathBuf),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("{path}:{line}: malformed line, expected {expected} tab-separated fields")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        expected: usize,
    },

    #[error("unknown entity {entity:?} in {split} split (strict mode)")]
    UnknownEntity { entity: String, split: String },

    #[error("unseen entity id {0} in lookup encoder")]
    UnseenEntity(usize),

    #[error("unknown stick parameter row {0}")]
    UnknownRow(usize),

    #[error("degenerate representation: zero-norm vector")]
    DegenerateRepresentation,

    #[error("query {0} has no positives")]
    NoPositives(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("gold entity {0} missing from scores")]
    GoldMissing(usize),

    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing input: {0}")]
    MissingInput(String),

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
