use thiserror::Error;

/// Errors produced by filter construction and analysis steps.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("ensemble needs at least {min} members, got {got}")]
    EnsembleTooSmall { min: usize, got: usize },

    #[error("non-finite state in member {member} at step {step}")]
    NonFiniteState { member: usize, step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),

    #[error("degenerate point cloud")]
    DegeneratePointCloud,

    #[error("gradient flow diverged; reduce the step size")]
    GradientFlowDiverged,

    #[error("training loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),

    #[error("particle degeneracy: all importance weights vanished")]
    ParticleDegeneracy,

    #[error("innovation covariance is singular")]
    SingularInnovation,

    #[error("log-likelihood required but not provided by the observation model")]
    MissingLogLikelihood,

    #[error("grid too small: boundary density is {0:.3e} of the maximum")]
    GridTooSmall(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("block {block} failed: {source}")]
    BlockFailed { block: usize, source: Box<Error> },

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
