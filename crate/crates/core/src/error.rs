use thiserror::Error;

/// Errors raised by the simulators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input lies outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters at which a formula divides by zero (e.g. Γ = 0).
    #[error("singular parameters: {0}")]
    SingularParameters(String),

    /// The stationarity condition is violated.
    #[error("unstable parameters: {0}")]
    Unstable(String),

    /// The effective squeezed bath violates |M| <= sqrt(N(N+1)).
    #[error("nonphysical effective bath: {0}")]
    Nonphysical(String),

    #[error("shape mismatch: expected {expected}x{expected}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        expected: usize,
        got_rows: usize,
        got_cols: usize,
    },

    /// A covariance that should be positive definite is not.
    #[error("degenerate covariance: {0}")]
    Degenerate(String),

    /// Population leaked into the top of the truncated basis.
    #[error("truncation overflow: tail mass {tail:.3e} at dim {dim} exceeds {limit:.1e}")]
    Truncation { tail: f64, dim: usize, limit: f64 },

    #[error("step size violation: {0}")]
    StepSize(String),

    #[error("no convergence: {0}")]
    Convergence(String),

    /// A stochastic trajectory failed at a given step.
    #[error("trajectory aborted at step {step}: {source}")]
    Trajectory {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
