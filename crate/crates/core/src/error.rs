use thiserror::Error;

/// Errors produced by the cuberec library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter violates a precondition.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// An index lies outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),

    /// Array or matrix dimensions do not match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A file does not conform to its declared format. `offset` is the byte
    /// position of the first offending byte.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A linear system is singular and cannot be solved without a nonzero
    /// Tikhonov weight.
    #[error("singular system, regularization required: {0}")]
    RegularizationRequired(String),

    /// The conjugate-gradient solver exhausted its iteration budget.
    #[error("conjugate gradient did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    CgNoConvergence { iterations: usize, residual: f64 },

    /// An iterative solver produced non-finite values.
    #[error("solver diverged: {0}")]
    Divergence(String),

    /// The input is degenerate for the requested operation.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;
