//! Crate-wide error type.
//!
//! Every fallible operation in the crate returns [`Result`]. Variants are
//! grouped by the subsystem that raises them; the payloads carry enough
//! context (byte offsets, node indices, names) to diagnose a failure without
//! re-running the computation.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Unified error type for all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Unexpected character while tokenizing an expression.
    #[error("lex error at byte {offset}: unexpected character {found:?}")]
    Lex { offset: usize, found: char },

    /// Malformed expression (unbalanced parentheses, dangling operator, ...).
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// An identifier does not exist in the variable space the expression was
    /// compiled against (e.g. `q4` with n = 2, or `b1` in phase space).
    #[error("unknown identifier {name:?} for {space} space with n = {n}")]
    Bind {
        name: String,
        space: &'static str,
        n: usize,
    },

    /// Domain error or non-finite value while evaluating a field.
    #[error("evaluation error: {message}")]
    Evaluation { message: String },

    /// Mismatched vector/matrix dimensions between arguments.
    #[error("dimension mismatch: {message}")]
    Dimension { message: String },

    /// The implicit midpoint solve failed to converge at a step.
    #[error("implicit solve diverged at step {step} (residual {residual:.3e} after {iterations} iterations)")]
    StepDivergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    /// An operation was asked for data the input does not carry
    /// (e.g. Jacobians requested from a trajectory integrated without them).
    #[error("state error: {message}")]
    State { message: String },

    /// Finite-difference probes truncated at different nodes, so a difference
    /// quotient cannot be formed at the requested node.
    #[error("truncation mismatch at node {node}: {message}")]
    TruncationMismatch { node: usize, message: String },

    /// Canonical-transform failure (singular twist block, Newton divergence).
    #[error("transform error: {message}")]
    Transform { message: String },

    /// Finite-difference PDE reference failure (grid or stability problem).
    #[error("pde error: {message}")]
    Pde { message: String },

    /// Run configuration rejected (schema violation, bad field value).
    #[error("config error: {message}")]
    Config { message: String },

    /// Filesystem failure while writing artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Shorthand used by evaluators.
    pub(crate) fn eval(message: impl Into<String>) -> Self {
        Error::Evaluation {
            message: message.into(),
        }
    }

    /// Shorthand for dimension mismatches.
    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dimension {
            message: message.into(),
        }
    }
}
