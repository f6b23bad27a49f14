//! Experiment harness around `zsq-core`: synthetic datasets, teacher
//! pretraining, experiment arms, sweeps and report export.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;
pub mod selftest;
pub mod sweep;

pub use config::{Arm, ExperimentConfig};
pub use experiment::{run_experiment, LabError, RunOutcome, RunRecord};
