//! Error taxonomy shared by every solver in the crate.
//!
//! Numerical routines distinguish between caller mistakes (bad shapes,
//! out-of-domain parameters), structural failures of the underlying problem
//! (singular Gramians, rank deficiency), resource guards on exponential-cost
//! oracles, and runtime diagnostics (divergence, accuracy loss).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension or shape mismatch between inputs.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The problem instance is structurally degenerate (singular matrix,
    /// empty control window, zero-measure set, ...).
    #[error("degenerate instance: {0}")]
    Degenerate(String),

    /// The pair (A, B) fails the controllability test required here.
    #[error("not controllable: {0}")]
    NotControllable(String),

    /// An exact oracle would exceed its enumeration budget.
    #[error("resource guard: {0}")]
    Resource(String),

    /// A forward simulation produced non-finite values.
    #[error("simulation diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// A quadrature or iterative scheme failed to reach its tolerance.
    #[error("accuracy failure: {0}")]
    Accuracy(String),

    /// The routine was called outside the restricted setting it supports.
    #[error("unsupported setting: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
