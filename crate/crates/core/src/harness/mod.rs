//! Configuration, checkpoints, metrics, plots and the command runners used by
//! the `scalegrpo` binary.

pub mod checkpoint;
pub mod config;
pub mod plot;
pub mod run;

pub use checkpoint::{Checkpoint, SeedRecord, FORMAT_VERSION};
pub use config::{CodebookConfig, ExperimentConfig};

use crate::error::Error;

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config { .. } | Error::Checkpoint(_) => 2,
        Error::Numeric(_) => 3,
        Error::RewardUnavailable(_) => 4,
        Error::UnsupportedVersion(_) => 5,
        Error::InvalidState(_) | Error::Protocol(_) | Error::Io { .. } => 1,
    }
}
