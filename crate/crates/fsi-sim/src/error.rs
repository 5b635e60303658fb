//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FsiError {
    #[error("grid resolution {found} too small for {op} (needs at least {needed} samples per axis)")]
    StencilUnderflow {
        op: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("degenerate deformation jacobian: min det = {min_det:.6e}")]
    DegenerateJacobian { min_det: f64 },

    #[error("inverse map did not converge after {iterations} iterations (residual {residual:.3e})")]
    InverseMapNoConvergence { iterations: usize, residual: f64 },

    #[error("energy is infinite: {reason}")]
    InfiniteEnergy { reason: &'static str },

    #[error(
        "optimizer stalled after {iterations} iterations: gradient norm {grad_norm:.3e} \
         above tolerance {tolerance:.3e}"
    )]
    OptimizerStall {
        iterations: usize,
        grad_norm: f64,
        tolerance: f64,
    },

    #[error(
        "per-step minimizing-movement estimate violated by {violation:.3e} \
         (budget {budget:.3e}) at substep {substep}"
    )]
    EstimateViolation {
        substep: usize,
        violation: f64,
        budget: f64,
    },

    #[error("structure substep {substep} failed: {source}")]
    SspSubstep {
        substep: usize,
        source: Box<FsiError>,
    },

    #[error("fluid substep at t = {time:.6e} failed: {source}")]
    FspSubstep { time: f64, source: Box<FsiError> },

    #[error("window {window} failed: {source}")]
    Window { window: usize, source: Box<FsiError> },

    #[error("CFL violation: dt = {dt:.3e} exceeds stable bound {bound:.3e}")]
    CflViolation { dt: f64, bound: f64 },

    #[error("linear solver failed to converge: residual {residual:.3e} after {iterations} iterations")]
    LinearSolve { iterations: usize, residual: f64 },

    #[error("pull-in failed: eps = {eps:.3e} too large, min det grad Phi = {min_det:.3e}")]
    PullInFailure { eps: f64, min_det: f64 },

    #[error("grid resolution {resolution} cannot resolve cantor level {level}")]
    CantorResolution { level: usize, resolution: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Parse { path: String, reason: String },
}

impl FsiError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FsiError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, FsiError>;
