use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("observation noise square root is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularRsqrt { condition: f64 },
    #[error("state dimension {got} is below the minimum {min} for this drift")]
    DimensionTooSmall { min: usize, got: usize },
    #[error("cannot coarsen a level-{from} path to level {to}")]
    LevelAboveSource { from: u32, to: u32 },
    #[error("covariance entry {value:e} exceeds the bound {bound:e} at step {step}")]
    CovarianceBlowup { step: usize, value: f64, bound: f64 },
    #[error("ensemble of {got} particles is too small (need at least 2)")]
    TooFewParticles { got: usize },
    #[error("sample covariance is singular even after regularization")]
    SingularCovariance,
    #[error("non-finite particle state at step {step}")]
    NonFiniteState { step: usize },
    #[error("operation requires a linear drift")]
    NotLinear,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sample allocation gives N_{level} = {n} < 2")]
    AllocationTooSmall { level: u32, n: usize },
    #[error("log-log fit needs positive coordinates, got ({x}, {y})")]
    NonPositivePoint { x: f64, y: f64 },
    #[error("parameter iterate became non-finite at iteration {iteration}")]
    NonFiniteTheta { iteration: usize },
    #[error("observation record ends at step {available}, need {needed}")]
    ObservationTooShort { available: usize, needed: usize },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, FilterError>;

impl From<std::io::Error> for FilterError {
    fn from(e: std::io::Error) -> Self {
        FilterError::Io(e.to_string())
    }
}

impl From<csv::Error> for FilterError {
    fn from(e: csv::Error) -> Self {
        FilterError::Io(e.to_string())
    }
}
