use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("grid function does not live on this mesh")]
    MeshMismatch,

    #[error("grid function has {found} values, mesh has {expected} nodes")]
    LengthMismatch { expected: usize, found: usize },

    #[error("non-finite value at node {0}")]
    NonFinite(usize),

    #[error("integrand d^{exponent} is not integrable: exponent must exceed -1")]
    NonIntegrable { exponent: f64 },

    #[error("coefficient is not symmetric at node {node}")]
    NonSymmetric { node: usize },

    #[error("degenerate ellipticity: smallest eigenvalue {alpha} at node {node}")]
    DegenerateEllipticity { alpha: f64, node: usize },

    #[error("unsupported coefficient: {0}")]
    UnsupportedCoefficient(String),

    #[error("unknown coefficient preset `{0}`")]
    UnknownPreset(String),

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    LinearSolver { iterations: usize, residual: f64 },

    #[error("eigen iteration did not converge after {iterations} iterations (residual {residual:e})")]
    EigenSolver { iterations: usize, residual: f64 },

    #[error("inadmissible parameters: {0}")]
    Regime(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("nonlinear iteration diverged after {iterations} sweeps (last residual {residual:e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("outer iteration did not converge after {iterations} steps (du = {du:e}, dv = {dv:e})")]
    OuterNonConvergence { iterations: usize, du: f64, dv: f64 },

    #[error("truncation level sigma = {sigma} is active: max u = {max_u}")]
    CutoffActive { sigma: f64, max_u: f64 },

    #[error("no positive root bracket for the subsolution constant")]
    NoRootBracket,

    #[error("empty region: no nodes with d(x) >= {margin}")]
    EmptyRegion { margin: f64 },

    #[error("only {found} usable nodes in the boundary layer (need at least {needed})")]
    TooFewNodes { found: usize, needed: usize },

    #[error("functional is not defined for gamma = {gamma} (requires gamma < 1)")]
    OutOfScope { gamma: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("incomplete run directory {0}")]
    IncompleteRun(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
