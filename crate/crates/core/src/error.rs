//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model validation, solvers, and oracles.
#[derive(Debug, Error)]
pub enum Error {
    /// The model failed validation; the report lists every violation.
    #[error("invalid market model: {0}")]
    InvalidModel(String),

    /// The EMM set M is empty at some step (u_t below the min-norm |theta|).
    #[error("empty EMM set at step {step}: u={u} below |theta_bar|={theta_bar_norm}")]
    EmptyEmmSet {
        step: usize,
        u: f64,
        theta_bar_norm: f64,
    },

    /// sigma is rank-deficient at some step.
    #[error("sigma not full rank at step {step} (min singular value {min_sv:.3e})")]
    RankDeficient { step: usize, min_sv: f64 },

    /// A kernel coordinate left the scenario ball.
    #[error("outside scenario ball: |s|={s_norm} > radius {radius}")]
    OutsideScenarioBall { s_norm: f64, radius: f64 },

    /// Non-finite input where a finite number is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    /// The explicit scheme would lose monotonicity at this step size.
    #[error(
        "monotonicity violated: u_max*sqrt(d*dt) = {value:.6} >= 1; refine dt (increase steps)"
    )]
    RefineDt { value: f64 },

    /// A tilted branch probability left (0, 1); the time step is too coarse.
    #[error("tilted probability out of range (|theta_i|*sqrt(dt) = {value:.6} >= 1); refine dt")]
    TiltOutOfRange { value: f64 },

    /// Custom penalties are only optimized over one-dimensional kernels.
    #[error("custom penalty requires kernel dimension <= 1, got {dim}")]
    UnsupportedKernelDim { dim: usize },

    /// The 1-D optimizer failed to bracket/converge for a custom penalty.
    #[error("kernel optimizer did not converge: {details}")]
    OptimizerFailed { details: String },

    /// An enumeration request exceeds the hard work budget.
    #[error("enumeration budget exceeded: {required} > {budget}")]
    BudgetExceeded { required: u64, budget: u64 },

    /// Grid/step-count guard for the tilted dynamic program.
    #[error("lattice too large for the tilted oracle: {0}")]
    OracleTooLarge(String),

    /// Inputs inconsistent with each other (sizes, indices, step bounds).
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;
