use thiserror::Error;

use crate::env::{Action, StateId};

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("world has no passable cells")]
    NoPassableCells,

    #[error("grid dimensions must be positive (got {rows}x{cols})")]
    EmptyGrid { rows: usize, cols: usize },

    #[error("cell ({row}, {col}) is outside a {rows}x{cols} grid")]
    CellOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("cell index {index} is outside a grid of {cells} cells")]
    CellIndexOutOfBounds { index: usize, cells: usize },

    #[error("cell ({row}, {col}) is blocked")]
    BlockedCell { row: usize, col: usize },

    #[error("state {0} does not exist in this world")]
    UnknownState(usize),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("expected {expected} feature rows, got {got}")]
    FeatureRowCount { expected: usize, got: usize },

    #[error("feature value {value} at row {row}, column {col} is outside [0, 1]")]
    FeatureOutOfRange { row: usize, col: usize, value: f64 },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("feature column {0} has no finite values")]
    EmptyColumn(usize),

    #[error("action {action:?} is not valid at state {state}")]
    InvalidAction { state: StateId, action: Action },

    #[error("cells {from} and {to} are not adjacent")]
    NotAdjacent { from: StateId, to: StateId },

    #[error("could not generate a connected world within {attempts} attempts")]
    Disconnected { attempts: usize },

    #[error("goal {goal} is unreachable from {origin}")]
    Unreachable { origin: StateId, goal: StateId },

    #[error("GPS point {index} has no candidate cell within {radius_m} m")]
    Unmatched { index: usize, radius_m: f64 },

    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite parameters after epoch {epoch}: {detail}")]
    NonFiniteParameters { epoch: usize, detail: String },

    #[error("distribution supports differ: {0} vs {1}")]
    SupportMismatch(usize, usize),

    #[error("q assigns zero probability to support index {0} where p is positive")]
    ZeroSupport(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("{0}")]
    Invalid(String),

    #[error("too many players for exact enumeration ({n} > {max}); use sampled_shapley")]
    TooManyPlayers { n: usize, max: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
