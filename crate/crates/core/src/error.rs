use thiserror::Error;

use crate::params::Regime;

/// Errors produced by the solvers and validators of this crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "det K = {det} is in the {regime:?} regime, which is out of scope: only indefinite \
         couplings (det K < 0) are handled here; positive-definite couplings are the coercive \
         case treated elsewhere"
    )]
    OutOfScopeRegime { det: f64, regime: Regime },

    #[error(
        "det K = {det} < -4: full-plane solutions are not available in this regime \
         (no uniform estimates for the regularized solutions when det K < -4)"
    )]
    RegimeBFullPlane { det: f64 },

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("grid kind does not match the operation: {0}")]
    WrongGridKind(&'static str),

    #[error("right-hand side has nonzero discrete mean {mean:e}")]
    NonZeroMean { mean: f64 },

    #[error("{solver}: no convergence after {iterations} iterations (residual {residual:e})")]
    MaxIterExceeded {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("line search stalled at residual {residual:e}")]
    LineSearchStalled { residual: f64 },

    #[error("outer iteration stalled: step {step:e} with residual {residual:e}")]
    Stalled { step: f64, residual: f64 },

    #[error("nonlinearity is not monotone at node {node} (dF/ds = {derivative:e})")]
    NonMonotone { node: usize, derivative: f64 },

    #[error("monotone iteration violated ordering at sweep {sweep}, node {node} ({detail})")]
    MonotonicityViolated {
        sweep: usize,
        node: usize,
        detail: &'static str,
    },

    #[error("infeasible torus configuration: alpha = {alpha}, beta = {beta}")]
    Infeasible { alpha: f64, beta: f64 },

    #[error("exponent argument {value:e} exceeds the overflow guard")]
    Overflow { value: f64 },

    #[error("sparse factorization failed: {0}")]
    Factorization(String),

    #[error("fit window [{r_min}, {r_max}] is outside the resolved region: {reason}")]
    WindowOutOfRange {
        r_min: f64,
        r_max: f64,
        reason: &'static str,
    },

    #[error("radial profile rejected: {0}")]
    SingularProfile(&'static str),

    #[error("quadrature region contains no nodes")]
    EmptyRegion,
}

pub type Result<T> = std::result::Result<T, Error>;
