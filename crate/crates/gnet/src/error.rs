//! Error types shared across the crate.

use thiserror::Error;

/// A tensor operation was applied to incompatible shapes.
#[derive(Debug, Clone, Error)]
#[error("shape error: {msg}")]
pub struct ShapeError {
    pub msg: String,
}

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        ShapeError { msg: msg.into() }
    }
}

/// Structural problems with graphs and graph-level operations.
#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("incompatible schema: {0}")]
    IncompatibleSchema(String),
    #[error("incompatible structure: {0}")]
    IncompatibleStructure(String),
    #[error("inconsistent batch: {0}")]
    InconsistentBatch(String),
    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },
    #[error("invalid graph: {0}")]
    Invalid(String),
}

/// Block or architecture configuration rejected before any computation ran.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset '{name}'; valid presets: {valid}")]
    UnknownPreset { name: String, valid: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Failure during a block application, tagged with the computation step
/// (1 edge update, 2 per-node aggregation, 3 node update, 4 edge-global
/// aggregation, 5 node-global aggregation, 6 global update).
#[derive(Debug, Error)]
pub enum BlockError {
    #[error("step {step} ({name}): {source}")]
    Step {
        step: u8,
        name: &'static str,
        source: ShapeError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub const STEP_NAMES: [&str; 6] = [
    "edge update",
    "per-node edge aggregation",
    "node update",
    "global edge aggregation",
    "global node aggregation",
    "global update",
];

impl BlockError {
    pub fn at_step(step: u8, source: ShapeError) -> Self {
        BlockError::Step {
            step,
            name: STEP_NAMES[(step as usize).clamp(1, 6) - 1],
            source,
        }
    }
}
