#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Library half of the `trainlab` command: experiment configs, presets and
//! the subcommand bodies.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod plot;
pub mod presets;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, run_variant, RunOptions};
