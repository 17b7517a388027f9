//! Experiment configuration, the CLI commands, and every file format they
//! read or write.
//!
//! Results are a structured JSON file per estimation (or per Monte Carlo run)
//! plus flat CSVs: the iterate trace, per-run final estimates, and the
//! per-parameter summary behind the boxplots.

mod commands;
mod config;
mod stats;

pub use commands::{
    cmd_estimate, cmd_montecarlo, cmd_moments, cmd_simulate, initial_params, load_inputs, noise_report,
    perturb, run_config, simulate_dataset, trace_csv_path, write_trace_csv, RunOutcome, RunRecord,
    SummaryRow,
};
pub use config::{AffineMatrices, ExperimentConfig, InitSpec, InputSpec, ModelSpec, BUILTINS};
pub use stats::{quantile, FiveNumber};
