use thiserror::Error;

use crate::grid::Location;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("assumption {assumption} rejected: {detail}")]
    Assumption {
        assumption: &'static str,
        detail: String,
    },

    #[error("staggering mismatch: expected {expected}, found {found}")]
    Staggering { expected: Location, found: Location },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("terminal condition violated: max |phi(T) - phi_T| = {0:e}")]
    TerminalCondition(f64),

    #[error(
        "proximal solve did not converge at cell (slice {slice}, node {node}) after {iterations} iterations"
    )]
    ProxNonConvergence {
        slice: usize,
        node: usize,
        iterations: usize,
    },

    #[error(
        "CFL condition violated (rate {rate:.4} > 1 at slice {slice}); use at least nt = {suggested_nt}"
    )]
    Cfl {
        rate: f64,
        slice: usize,
        suggested_nt: usize,
    },

    #[error("divergence detected at iteration {iteration}: gap {gap:e} exceeds 10x the best gap {best:e}")]
    Divergence {
        iteration: usize,
        gap: f64,
        best: f64,
    },

    #[error("game configuration rejected: {0}")]
    GameConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
