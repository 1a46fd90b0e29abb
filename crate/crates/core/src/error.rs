use thiserror::Error;

/// Errors produced while fitting, designing or running a stacking campaign.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: {points} points but {values} values")]
    LengthMismatch { points: usize, values: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("kernel matrix not positive definite up to jitter {max_jitter:e} (n = {n})")]
    FactorizationFailure { n: usize, max_jitter: f64 },

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("unsupported dimension {0} (Sobol table covers 1..=20)")]
    UnsupportedDimension(usize),

    #[error("emulation bound {bound:.4e} cannot reach target {target:.4e} within {cap} points {scope}")]
    BudgetInfeasible {
        bound: f64,
        target: f64,
        cap: usize,
        scope: &'static str,
    },

    #[error("no convergence after {0} fidelity levels")]
    MaxLevelsExceeded(usize),

    #[error("rate estimate undefined: {0}")]
    RateEstimate(String),

    #[error("simulator protocol error: {message} (line: {line:?})")]
    Protocol { message: String, line: String },

    #[error("simulator crashed: {0}")]
    SimulatorCrash(String),

    #[error("simulator timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("simulator failed at stage L={stage}, level {level}: {source}")]
    Stage {
        stage: usize,
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    /// True when the error originates from the simulator (possibly wrapped in stage context).
    pub fn is_simulator_failure(&self) -> bool {
        match self {
            Error::Protocol { .. } | Error::SimulatorCrash(_) | Error::Timeout(_) => true,
            Error::Stage { source, .. } => source.is_simulator_failure(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
