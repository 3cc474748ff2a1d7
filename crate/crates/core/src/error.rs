//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by numerical routines, simulators and the benchmark
/// harness. Exit-code mapping for the CLI lives in the `lt` binary.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix that must be positive semi-definite has a pivot or
    /// eigenvalue below the tolerance.
    #[error("matrix is not positive semi-definite ({context}: {value:.3e})")]
    NotPsd { context: &'static str, value: f64 },

    /// A matrix that must be symmetric violates the symmetry tolerance.
    #[error("matrix is not symmetric (max |M - M^T| entry = {max_abs_diff:.3e})")]
    Asymmetric { max_abs_diff: f64 },

    /// Operand shapes are incompatible.
    #[error("dimension mismatch: {context} ({left} vs {right})")]
    DimMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    /// A scaling update produced a non-finite value. Log-domain updates
    /// make this unreachable for finite inputs; seeing it is a bug signal.
    #[error("numeric overflow in {0}")]
    NumericOverflow(&'static str),

    /// A simulated coordinate or a training loss left the finite range.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// The explicit finite-difference step violates the stability bound.
    #[error("unstable step: step {step:.3e} exceeds stability bound {bound:.3e}")]
    UnstableStep { step: f64, bound: f64 },

    /// Ornstein-Uhlenbeck rate must be positive.
    #[error("nonpositive theta: {0}")]
    NonpositiveTheta(f64),

    /// Confidence parameter must lie in (0, 1).
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),

    /// Accuracy parameter must lie in (0, 1).
    #[error("epsilon must lie in (0, 1), got {0}")]
    BadEpsilon(f64),

    /// Z statistic is undefined when all improvements are identical.
    #[error("zero variance across {0} improvement values")]
    ZeroVariance(usize),

    /// Trace series is empty.
    #[error("empty trace")]
    EmptyTrace,

    /// Unknown baseline identifier.
    #[error("unknown method `{0}` (expected finetune_det, mmd_align, det_ot or proposed)")]
    UnknownMethod(String),

    /// Invalid argument that does not fit a more specific variant.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed text input (CSV or config), with 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
