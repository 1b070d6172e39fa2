use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFinite,

    #[error("parameter vector must have at least one entry")]
    EmptyVector,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is not symmetric (max |a_ij - a_ji| = {0:e})")]
    Asymmetric(f64),

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("label {value} at row {index} is not +1 or -1")]
    InvalidLabel { index: usize, value: f64 },

    #[error("iterate left the domain at step {step}: |theta|_inf = {norm:e} >= radius {radius:e}")]
    DomainExit { step: usize, norm: f64, radius: f64 },

    #[error("history is empty")]
    EmptyHistory,

    #[error("{0} needs a smooth K; the exact sign map is only available in memoryful runs")]
    NonSmooth(&'static str),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("family of {size} batches is too large to enumerate (max {max}); use the Monte Carlo estimator")]
    FamilyTooLarge { size: usize, max: usize },

    #[error("log-log fit needs at least {needed} points above the floor, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("integration step dt = {dt:e} exceeds h/4 = {limit:e}")]
    StepTooLarge { dt: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
