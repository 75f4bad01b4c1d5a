//! Experiment configuration, batch runs, sweeps and result files.

pub mod config;
pub mod experiment;
pub mod image;
pub mod selftest;
pub mod sweep;
pub mod toy;

pub use config::{ExperimentConfig, PriorKeyword, PriorSpec};
pub use experiment::{
    aggregate, run_experiment, run_seeds, run_to_dir, write_aggregate, write_metrics, AggregateRow,
    MetricsRow, SeedOutcome, AGGREGATE_HEADER, METRICS_HEADER, THREADS_ENV,
};
pub use image::{emit_image, read_pgm, Pgm};
pub use selftest::run_selftest;
pub use sweep::{sweep, sweep_to_dir, GridSpec, SweepConfig, SweepOutput};
pub use toy::{ToyPriorSpec, ToyTask};
