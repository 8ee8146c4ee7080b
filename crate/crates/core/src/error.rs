use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("eigenvalue bracket {index} does not change sign on [{lo}, {hi}]")]
    RootBracket { index: usize, lo: f64, hi: f64 },

    #[error("1D eigenpair pool of size {pool} cannot certify the top {n_kl} tensor products")]
    InsufficientPool { pool: usize, n_kl: usize },

    #[error("level mismatch: {left} vs {right}")]
    LevelMismatch { left: usize, right: usize },

    #[error("level {level} is outside the hierarchy 0..={max}")]
    LevelOutOfRange { level: usize, max: usize },

    #[error("conductivity must be strictly positive (cell {cell}: {value})")]
    NonPositiveConductivity { cell: usize, value: f64 },

    #[error("factorization failed: pivot {pivot} at row {row} is not positive")]
    Factorization { row: usize, pivot: f64 },

    #[error("iterative solve stalled after {iterations} iterations (relative residual {residual:e})")]
    SolverStalled { iterations: usize, residual: f64 },

    #[error("Newton iteration did not converge in {iterations} steps; residual history {history:?}")]
    NewtonDiverged { iterations: usize, history: Vec<f64> },

    #[error("a reaction term is required for this operation")]
    NoReaction,

    #[error("variance estimation needs at least 2 samples, got {0}")]
    TooFewSamples(usize),

    #[error("cost estimate at level {0} is not positive")]
    ZeroCost(usize),

    #[error("search direction is not a descent direction at iteration {iteration} (slope {slope:e})")]
    NotDescent { iteration: usize, slope: f64 },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("configuration error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
