use thiserror::Error;

/// Errors raised by the optimization toolkit.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate retraction: |x + v| = {norm:e} is below the 1e-12 threshold")]
    DegenerateRetraction { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("point is not on the manifold: {0}")]
    NotOnManifold(String),

    #[error("tangent vector is based at a different point")]
    BaseMismatch,

    #[error("outcome index {index} out of range for a sample space of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("invalid sample space: {0}")]
    InvalidSampleSpace(String),

    #[error("no finite bound on the stochastic gradients over an unbounded region")]
    UnboundedRegion,

    #[error("invalid batch plan: {0}")]
    InvalidPlan(String),

    #[error("enumeration of {count} outcomes exceeds the budget of {budget}")]
    EnumerationBudgetExceeded { count: u128, budget: u128 },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparameters(String),

    #[error("negative input: {0}")]
    NegativeInput(f64),

    #[error("non-finite value encountered at iteration {t}: {what}")]
    NonFiniteValue { t: usize, what: String },

    #[error("sampler failure: {0}")]
    SamplerFailure(String),

    #[error("confinement violated at iteration {t}: {value} > {bound}")]
    ConfinementViolation { t: usize, value: f64, bound: f64 },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid data: {0}")]
    InvalidData(String),
}

pub type Result<T> = std::result::Result<T, Error>;
