use thiserror::Error;

use crate::model::{ActionId, StateId, Violation};

#[derive(Debug, Error)]
pub enum Error {
    #[error("model is not well-formed: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidModel(Vec<Violation>),

    #[error("expected {expected} states, got {actual}")]
    StateCountMismatch { expected: usize, actual: usize },

    #[error("state {0} does not exist")]
    UnknownState(StateId),

    #[error("action {action} is not enabled in state {state}")]
    ActionNotEnabled { state: StateId, action: ActionId },

    #[error("permissive scheduler allows no action in state {0}")]
    EmptyChoice(StateId),

    #[error("invalid scheduler distribution at state {state}: {reason}")]
    InvalidDistribution { state: StateId, reason: String },

    #[error("enumeration of {count} items exceeds the cap of {cap}")]
    CapExceeded { count: u128, cap: u128 },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("no cost oracle attached; true costs are unavailable")]
    MissingOracle,

    #[error("cost for action {action} is {value}, outside bounds [{lower}, {upper}]")]
    CostOutOfBounds {
        action: ActionId,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("solver error: {0}")]
    Solver(String),

    #[error("synthesized scheduler failed safety re-verification (max reach {value} > {lambda})")]
    Unverified { value: f64, lambda: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
