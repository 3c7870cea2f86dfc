//! Standard-library side of filter grafting: snapshot files, TOML experiment
//! configs, history files, a CIFAR-10 reader and the threaded coordinator.

pub mod cifar;
pub mod concurrent;
pub mod config;
mod error;
pub mod history;
pub mod snapshot;
pub mod toy;

pub use config::{ConfigFile, DataSource, Execution};
pub use error::{Error, Result};
pub use snapshot::{read_snapshot, write_snapshot, SnapshotError};

use graft_core::coordinator::{run_sequential, RunOutput};
use graft_core::data::Dataset;

/// Runs the configured experiment with the configured executor.
pub fn run(cfg: &ConfigFile, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    match cfg.execution {
        Execution::Concurrent => concurrent::run_concurrent(&cfg.experiment, train, test),
        Execution::Sequential => Ok(run_sequential(&cfg.experiment, train, test)?),
    }
}
