use std::io;

use thiserror::Error;

/// Errors produced anywhere in the verification pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid inventory: {0}")]
    Inventory(String),

    #[error("utterance {utterance}: {reason}")]
    InvalidUtterance { utterance: String, reason: String },

    #[error("utterance {utterance}: segment {segment} (phoneme index {phoneme}) index out of inventory (I = {inventory_size})")]
    IndexOutOfInventory {
        utterance: String,
        segment: usize,
        phoneme: usize,
        inventory_size: usize,
    },

    #[error("utterance {utterance}: segments {first} and {second} overlap or are out of order")]
    OverlappingSegments {
        utterance: String,
        first: usize,
        second: usize,
    },

    #[error("unknown utterance id {0:?}")]
    UnknownUtterance(String),

    #[error("utterance empty after removal")]
    EmptyAfterRemoval,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root does not depend on any differentiable leaf")]
    DetachedRoot,

    #[error("zero-norm trait passed to cosine")]
    ZeroNorm,

    #[error("no shared phonemes")]
    NoSharedPhonemes,

    #[error("degenerate weights: shared-phoneme weight sum {0:e} is below epsilon")]
    DegenerateWeights(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
}

pub type Result<T> = std::result::Result<T, Error>;
