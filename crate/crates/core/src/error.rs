//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate input: cannot l2-normalize a zero vector")]
    DegenerateInput,

    #[error("non-finite gradient at parameter index {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("missing forward cache: backward requires a train-mode forward pass")]
    MissingCache,

    #[error("missing {modality} embedding for item {id}")]
    MissingEmbedding { modality: &'static str, id: u64 },

    #[error("missing {modality} feature vector for item {id}")]
    MissingFeature { modality: &'static str, id: u64 },

    #[error("shape mismatch between model and {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("empty task data: {0}")]
    EmptyTaskData(&'static str),

    #[error("duplicate task id {0}")]
    DuplicateTaskId(u16),

    #[error("task {0} is already indexed")]
    TaskAlreadyIndexed(u16),

    #[error("policy violation: item {item_id} ({modality}) is already live under no-reindex")]
    PolicyViolation { modality: &'static str, item_id: u64 },

    #[error("empty scope: no indexed entries eligible for this query")]
    EmptyScope,

    #[error("K must be at least 1, got {0}")]
    InvalidK(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("NaN loss at task {task}, epoch {epoch}, batch {batch}; images {image_ids:?}, texts {text_ids:?}")]
    NanLoss {
        task: u16,
        epoch: usize,
        batch: usize,
        image_ids: Vec<u64>,
        text_ids: Vec<u64>,
    },

    #[error("bad magic: expected {expected:?}, got {actual:?}")]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("file truncated or malformed: {0}")]
    Truncated(&'static str),

    #[error("non-finite value in row {row}")]
    NonFiniteRow { row: usize },

    #[error("duplicate item id {id} in {what}")]
    DuplicateId { what: &'static str, id: u64 },

    #[error("invalid field {field}: {value}")]
    InvalidField { field: &'static str, value: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
