//! Experiment runner: configuration, named experiments and CSV reports.

pub mod config;
pub mod experiments;
pub mod report;

pub use config::ExperimentConfig;
pub use experiments::{find, run_experiment, Experiment, EXPERIMENTS};
pub use report::{Check, Report, Table};
