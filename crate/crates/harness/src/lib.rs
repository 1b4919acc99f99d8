//! Operational shell around `ldeq-core`: run configuration, datasets,
//! the training and evaluation loops, metric logging, checkpoints, the
//! empirical Lipschitz checks and the `ldeq` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod lipcheck;
pub mod metrics;
pub mod optim;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Origin, Result};
