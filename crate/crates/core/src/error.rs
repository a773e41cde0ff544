use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("backward needs a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("token id {id} at offset {offset} is out of range for vocabulary size {vocab_size}")]
    TokenOutOfRange { id: u64, offset: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("row {row} out of range for a sequence of {rows} rows")]
    RowOutOfRange { row: usize, rows: usize },

    #[error("corpus of {len} tokens is too short, need at least {needed}")]
    CorpusTooShort { len: usize, needed: usize },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("truncated payload in {path}: {detail}")]
    Truncated { path: PathBuf, detail: String },

    #[error("vocabulary mismatch in {path}: file declares {found}, expected {expected}")]
    VocabMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at batch {batch} (last good batch {last_good})")]
    Diverged { batch: usize, last_good: usize },

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
