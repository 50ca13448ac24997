//! Crate-wide error type. Variants carry enough context to name the offending
//! quantity; configuration-file diagnostics live in [`crate::config`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension outside the supported set {1, 2, 3}, or an operation that
    /// has no meaning in the given dimension (e.g. direction sampling in d=1).
    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    /// A scalar or vector argument violates a documented precondition.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Mean kinetic energy too close to zero for the thermostat force.
    #[error("degenerate energy: u = {u:.3e} is at or below the threshold {threshold:.3e}")]
    DegenerateEnergy { u: f64, threshold: f64 },

    /// Operations that need a nonzero driving field (fixed points, y-branch).
    #[error("zero field: {0}")]
    ZeroField(String),

    /// Initial data outside the physically admissible region.
    #[error("inadmissible state: {0}")]
    Inadmissible(String),

    /// A query outside the time range a solution covers.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Not enough data points / seeds / samples for the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Deterministic quadrature or iteration failed to reach its tolerance.
    #[error("did not converge: {0}")]
    NonConvergent(String),

    /// Guard against accidentally enormous computations.
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    /// CFL or positivity violation in the finite-volume solver.
    #[error("solver constraint violated: {0}")]
    SolverConstraint(String),

    /// Mass escaping the velocity grid faster than the configured budget.
    #[error("boundary flux {flux:.3e} exceeds {limit:.3e} per step; enlarge v_max")]
    GridTooSmall { flux: f64, limit: f64 },

    /// Parameter sets that must agree (PDE vs ODE comparison) do not.
    #[error("parameter mismatch: {0}")]
    ParameterMismatch(String),

    #[error("configuration error:\n{0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
