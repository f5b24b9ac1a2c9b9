//! Library behind the `dpgrad` command: training runs, micro-benchmarks,
//! the memory model, accounting traces and report rendering.

pub mod account;
pub mod bench;
pub mod config;
pub mod error;
pub mod memory;
pub mod report;
pub mod train;

pub use error::{CliError, Result};
