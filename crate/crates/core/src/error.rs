use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("vertex id {id} out of bounds (limit {limit})")]
    Bounds { id: u64, limit: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("FPGA {fpga}: resident features need {required} bytes but capacity is {capacity}")]
    Capacity { fpga: usize, required: u64, capacity: u64 },

    #[error("partition {partition} has no remaining target vertices")]
    Exhausted { partition: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty design space: {0}")]
    EmptyDesignSpace(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("infeasible accelerator configuration: {0}")]
    Infeasible(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
