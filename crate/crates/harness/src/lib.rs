//! Experiment harness for the `ngvi` library: configuration, data ingestion and synthesis,
//! seed-parallel runs with CSV metric streams, and the verification subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod experiment;
pub mod suites;

pub use config::{ExperimentConfig, Overrides};
pub use data::{load_csv, synth, CsvOptions, DataError, Synthetic};
pub use experiment::{run_experiment, MetricRecord, Summary};
