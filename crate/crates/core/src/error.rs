use thiserror::Error;

/// Errors raised by the model, cost and solver layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("decision {decision} has zero marginal probability; posterior undefined")]
    ZeroMarginal { decision: usize },

    #[error("garbling is not a stochastic matrix: {0}")]
    NonStochastic(String),

    #[error("experiment is on the boundary of the simplex (p({decision}|{state}) = {value:e})")]
    BoundaryPoint { decision: usize, state: usize, value: f64 },

    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("operation requires a Shannon cost model: {0}")]
    NonShannonUnsupported(String),

    #[error("no binding pattern produced a sign-consistent KKT solution ({tried} patterns tried)")]
    NoPatternFound { tried: usize },

    #[error("profile is not KKT-consistent (residual {residual:e} > {tolerance:e})")]
    InconsistentProfile { residual: f64, tolerance: f64 },

    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),

    #[error("target {target} outside attainable range [{low}, {high}]")]
    OutOfRange { target: f64, low: f64, high: f64 },

    #[error("prior {prior} outside the grid range [{low}, {high}]")]
    DegeneratePrior { prior: f64, low: f64, high: f64 },

    #[error("malformed problem at {pointer}: {message}")]
    Malformed { pointer: String, message: String },

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
