//! Modeling and simulation of synchronous mini-batch GNN training on a
//! host CPU with several FPGA accelerators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dse;
pub mod error;
pub mod graph;
pub mod model;
pub mod partition;
pub mod perfmodel;
pub mod refexec;
pub mod sampler;
pub mod scheduler;
pub mod simulator;
pub mod verify;

pub use error::{Error, Result};
