use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-scalar root: gradient requires a (1,1)-shaped root node")]
    NonScalarRoot,

    #[error("hutchinson estimator requires at least one probe")]
    ZeroProbes,

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("non-finite loss at iteration {iteration}")]
    DivergentLoss { iteration: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid diffusion schedule: sigma_max must exceed sigma_min")]
    InvalidSchedule,

    #[error("trajectory/policy mismatch: {0}")]
    TrajectoryMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate fitted variance in dimension {dim}")]
    DegenerateVariance { dim: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
