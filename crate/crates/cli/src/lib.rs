//! Experiment runner for Composer models.
//!
//! One TOML file ([`ExperimentConfig`]) determines a run. The `composer`
//! binary exposes the subcommands in [`commands`]; every command writes its
//! artifacts into the run's output directory next to a canonical copy of the
//! config.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate_entropy, cmd_eval, cmd_gen_data, cmd_heatmap, cmd_sweep, cmd_train, Run,
};
pub use config::{AblationSpec, DatasetKind, DatasetSpec, ExperimentConfig, SweepSpec};

use composer_core::Error;

/// Process exit status for an error: 2 configuration, 3 data, 4 divergence.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Divergence(_) => 4,
        Error::Usage(_) | Error::Internal(_) => 1,
    }
}
