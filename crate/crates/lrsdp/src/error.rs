//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by problem construction, factorizations and solves.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// The predicted Gram matrix is too large to form; callers fall back to
    /// the identity weight.
    #[error("refusing to form Gram matrix: predicted {predicted} nonzeros exceeds threshold {threshold}")]
    RefuseToForm { predicted: u64, threshold: u64 },

    /// Cholesky pivot stayed nonpositive through the whole perturbation
    /// escalation ladder.
    #[error("degenerate Gram matrix: pivot {pivot:.3e} at index {index} after perturbation {perturbation:.3e}")]
    DegenerateGram {
        index: usize,
        pivot: f64,
        perturbation: f64,
    },

    #[error("objective evaluation failed: {0}")]
    ObjectiveEval(String),

    #[error("gradient check failed on registered objective: relative error {rel_err:.3e} at probe point {point}")]
    GradientCheck { point: usize, rel_err: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("oracle failed: {0}")]
    OracleFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
