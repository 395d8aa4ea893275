use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} is not a node of the grid (step {step})")]
    OffGrid { t: f64, step: f64 },

    #[error("time {t} lies outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("paths live on different grids")]
    GridMismatch,

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("Picard iteration is not contracting in window [{start}, {end}] (change ratios {ratios:?})")]
    NotContracting {
        start: usize,
        end: usize,
        ratios: Vec<f64>,
    },

    #[error("Picard iteration did not reach tolerance in window [{start}, {end}] after {iters} iterations (last change {last_change:e})")]
    NoConvergence {
        start: usize,
        end: usize,
        iters: usize,
        last_change: f64,
    },

    #[error("regression failed at node {node}: {reason}")]
    Regression { node: usize, reason: String },

    #[error("tree of {size} nodes exceeds the cap of {cap}")]
    TreeTooLarge { size: u128, cap: u128 },

    #[error("{0}")]
    Unsupported(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("malformed ensemble file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
