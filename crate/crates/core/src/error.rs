use thiserror::Error;

/// Errors shared across the geometry, field and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("metric is numerically singular at {point:?} (condition number {cond:.3e} above cap {cap:.3e})")]
    SingularMetric {
        point: Vec<f64>,
        cond: f64,
        cap: f64,
    },

    #[error("point {point:?} outside the chart domain: {reason}")]
    DomainError { point: Vec<f64>, reason: String },

    #[error("non-regular deformation: det F = {det:.3e} at or below floor {floor:.3e}")]
    NonRegular { det: f64, floor: f64 },

    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("index out of range: {0}")]
    IndexError(String),

    #[error("operation requires stored energy kind {expected}, model has {found}")]
    WrongEnergyKind { expected: String, found: String },

    #[error("stored energy is not differentiable at the sample: {0}")]
    NonDifferentiable(String),

    #[error("jet sample carries no Lagrange multiplier")]
    MissingMultiplier,

    #[error("Newton iteration did not converge: residual {residual:.3e} after {iters} iterations (tol {tol:.3e})")]
    NewtonDiverged {
        residual: f64,
        iters: usize,
        tol: f64,
    },

    #[error("constraint Jacobian is rank deficient: {0}")]
    SingularSaddle(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
