//! Configuration, checkpoints and the experiment runner behind the `cfl` binary.

pub mod checkpoint;
mod config;
mod experiment;

pub use config::{DatasetSpec, LatencySection, RunConfig, TrainSection};
pub use experiment::{run_experiment, Experiment, ResultRow, ResultTable, BASELINE};
