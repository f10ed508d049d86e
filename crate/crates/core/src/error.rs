use thiserror::Error;

/// Errors surfaced by the model math, mask construction, scheduling and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("input too short: {0}")]
    Length(String),

    #[error("token id {0} out of range for vocabulary")]
    Vocab(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("utterance {utterance} has {frames} frames, exceeding row capacity {capacity}")]
    Capacity {
        utterance: String,
        frames: usize,
        capacity: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("mask spec error: {0}")]
    MaskSpec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
