//! Dataset files, snapshots, training orchestration and the `erd` CLI.

pub mod cli;
pub mod config;
pub mod dataset_io;
pub mod dump;
mod error;
pub mod report;
pub mod snapshot;
pub mod trainer;

pub use erd_core;
pub use error::{ErdError, Result};
