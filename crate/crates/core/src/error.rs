use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty attention row")]
    EmptyAttentionRow,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceOverflow { len: usize, max: usize },

    #[error("unknown token id {id} (vocabulary has {vocab} entries)")]
    UnknownToken { id: u32, vocab: usize },

    #[error("position {position} conflicts with cached position {last}")]
    PositionConflict { position: usize, last: usize },

    #[error("invalid sequence: {0}")]
    Sequence(String),

    #[error("eviction: {0}")]
    Eviction(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("task: {0}")]
    Task(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
