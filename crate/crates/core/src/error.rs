use thiserror::Error;

/// Errors shared by all modules of the crate.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Total masses differ by more than the renormalization threshold.
    #[error("mass mismatch: lhs total {lhs}, rhs total {rhs} (relative gap {rel:.3e})")]
    MassMismatch { lhs: f64, rhs: f64, rel: f64 },

    /// The LP solver failed; the message carries an instance dump.
    #[error("LP failure: {0}")]
    LpFailure(String),

    /// Sinkhorn did not reach the marginal tolerance within the iteration cap.
    #[error("entropic solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A normalized coefficient was requested on a ball of zero mass.
    #[error("empty ball: mu(B({center:?}, {radius})) = 0")]
    EmptyBall { center: Vec<f64>, radius: f64 },

    /// Quadrature would exceed the configured node cap.
    #[error("quadrature node cap exceeded: {requested} nodes > cap {cap}")]
    NodeCapExceeded { requested: usize, cap: usize },

    /// A lattice axiom failed on a constructed cube.
    #[error("lattice axiom violation: {0}")]
    AxiomViolation(String),

    /// Lattice parameters cannot produce a valid hierarchy.
    #[error("infeasible lattice parameters: {0}")]
    ParameterInfeasible(String),

    /// Walked past the root cube.
    #[error("ancestor lookup reached the root (requested gap {gap}, available {available})")]
    RootReached { gap: usize, available: usize },

    /// Graph construction has no base plane to work over.
    #[error("degenerate base: {0}")]
    DegenerateBase(String),

    /// Invalid argument or malformed input data.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Parse error with file position.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
