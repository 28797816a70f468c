//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MhdError>;

#[derive(Debug, Error)]
pub enum MhdError {
    #[error("orientation lost: Jacobian determinant {det:.3e} <= 0 at node {node} (t = {t})")]
    Orientation { node: usize, det: f64, t: f64 },

    #[error("metric degenerate: condition number {cond:.3e} exceeds {limit:.3e} at node {node}")]
    Conditioning { node: usize, cond: f64, limit: f64 },

    #[error("elliptic solver did not converge: relative residual {residual:.3e} after {iterations} iterations (history: {history:?})")]
    SolverDiverged {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("time integration blew up at t = {t}: {what}")]
    Instability { t: f64, what: String },

    #[error("vacuum formation: density {rho:.3e} fell below floor {floor:.3e}")]
    Vacuum { rho: f64, floor: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("history window too small: need {needed} uniformly spaced snapshots around t = {t}, have {available}")]
    Window {
        needed: usize,
        available: usize,
        t: f64,
    },

    #[error("unsupported derivative order {order} (max {max})")]
    UnsupportedOrder { order: usize, max: usize },

    #[error("fixed-point iteration diverged after {iterations} sweeps; update-norm history: {history:?}")]
    IterationDiverged {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
