//! Synthetic task, configuration, experiment orchestration and the baseline
//! comparison.

pub mod compare;
pub mod config;
pub mod experiment;
pub mod synthetic;

pub use compare::{compare_baselines, BaselineTable, Method};
pub use config::{ExperimentConfig, RunConfig, Stage};
pub use experiment::{run_experiment, RunOptions, RunOutcome, RunRecord, RunStatus};
