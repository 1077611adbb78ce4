use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index 0 has no sign")]
    ZeroIndex,
    #[error("invalid site set: {0}")]
    InvalidSites(String),
    #[error("site sets of the operands differ")]
    SiteMismatch,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter excluded: divisor {value:e} below floor {floor:e} at k={k:?}")]
    ExcludedParameter { k: Vec<i64>, value: f64, floor: f64 },
    #[error("solver hypothesis failed: {0}")]
    HypothesisFailure(String),
    #[error("linear solve failed: {0}")]
    SolveFailure(String),
    #[error("expansion leaves its domain at grid point {point}: {reason}")]
    Domain { point: usize, reason: String },
    #[error("contraction failed at step {step}: measured 1e{measured_log10:.3} > scheduled 1e{scheduled_log10:.3}")]
    ContractionFailure { step: usize, measured_log10: f64, scheduled_log10: f64 },
    #[error("every grid point has been excluded")]
    AllExcluded,
    #[error("schedule undefined: {0}")]
    Schedule(String),
    #[error("malformed series dump: {0}")]
    Parse(String),
    #[error("empty range: {0}")]
    EmptyRange(String),
}

pub type Result<T> = std::result::Result<T, Error>;
