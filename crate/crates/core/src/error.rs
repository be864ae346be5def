//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("tape already consumed by a previous backward call")]
    TapeConsumed,

    #[error("parameter {name} has no gradient (backward not called since last step?)")]
    MissingGradient { name: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("episode generation failed for task {task}, stage {stage}: {reason}")]
    Generation {
        task: String,
        stage: String,
        reason: String,
    },

    #[error("no importance rule for task {task}, state pair ({left}, {right})")]
    UnmappedStatePair {
        task: String,
        left: String,
        right: String,
    },

    #[error("distance trace too short: {len} frames (need at least 3)")]
    TraceTooShort { len: usize },

    #[error("length mismatch: {what}: {lhs} vs {rhs}")]
    LengthMismatch {
        what: String,
        lhs: usize,
        rhs: usize,
    },

    #[error("VLM request failed at frame {frame} after {attempts} attempts: {reason}")]
    VlmTransport {
        frame: usize,
        attempts: usize,
        reason: String,
    },

    #[error("unparseable state reply at frame {frame}: {raw:?}")]
    VlmUnparseable { frame: usize, raw: String },

    #[error("VLM backend not configured: {0}")]
    VlmNotConfigured(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
