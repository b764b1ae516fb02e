//! Crate-wide error type.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite input in {context}")]
    NonFinite { context: String },

    #[error("Newton iteration did not converge after {iterations} steps (residual {residual:.3e})")]
    NewtonNoConvergence { iterations: usize, residual: f64 },

    #[error("singular Jacobian: smallest/largest singular value ratio {ratio:.3e}")]
    SingularJacobian { ratio: f64 },

    #[error(
        "noise decoupling violated at derivative order {order}: \
         max |L_l S^{order} h| = {max_violation:.3e} over the sampled neighbourhood; \
         iterating the stochastic Lie derivative past this order would require \
         derivatives of the white noise"
    )]
    NoiseDecoupling { order: usize, max_violation: f64 },

    #[error(
        "control enters the diffusion term (max |m| = {max_magnitude:.3e}): the r-th output \
         derivative becomes quadratic in u and both the linearising and the compensating \
         control constructions break down; only m = 0 systems are supported"
    )]
    ControlInDiffusion { max_magnitude: f64 },

    #[error("control coefficient b = {b:.3e} is below the singularity threshold")]
    SingularControl { b: f64 },

    #[error("expected {expected} completion functions, got {got}")]
    WrongCompletionCount { expected: usize, got: usize },

    #[error(
        "coordinate change has input-dependent internal dynamics (max |L_g phi_j| = {max_lg:.3e}); \
         a normal form requires completions with L_g phi_j = 0"
    )]
    InputDependentInternalDynamics { max_lg: f64 },

    #[error("relative degree equals the state dimension: no internal dynamics")]
    NoInternalDynamics,

    #[error("state became non-finite at step {step} (t = {t:.6e})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("state left the working neighbourhood at step {step} (t = {t:.6e}): {detail}")]
    GuardTripped { step: usize, t: f64, detail: String },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("invalid pole set: {0}")]
    Poles(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("in-run assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
