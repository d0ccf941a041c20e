//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the tagging engine and its harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for an operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad input data (out-of-vocab id, empty file, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Corpus text that cannot be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Invalid entity-type schedule.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Greedy slicing could not produce a valid partition.
    #[error("slicing error: {0}")]
    Slice(String),

    /// Checkpoint contents inconsistent with expectations.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Invalid synthetic-corpus specification.
    #[error("corpus spec error: {0}")]
    Spec(String),

    /// Training diverged or otherwise failed.
    #[error("training error at step {step}, epoch {epoch}, batch {batch}: {message}")]
    Train {
        step: usize,
        epoch: usize,
        batch: usize,
        message: String,
    },

    /// Run configuration problems, reported all at once.
    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
