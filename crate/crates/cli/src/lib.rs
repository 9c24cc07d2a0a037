//! Experiment definition and execution for the `tlqr` command-line tool.
//!
//! A run reads one TOML config, sweeps one axis (noise scale, replanning
//! threshold or control horizon) over a grid, and runs a Monte Carlo batch
//! for every (grid value, controller) pair on a shared seed bank. Results
//! land in `<output>/<name>-<hash>/` as comma-separated tables; `report`
//! turns them into plot-ready series.

pub mod check;
pub mod config;
pub mod report;
pub mod run;

pub use config::{load_config, parse_config, ConfigError, ExperimentConfig};
pub use report::{write_report, ReportError};
pub use run::{config_hash, run_dir, run_experiment, RunError, RunOutcome, RunStatus};

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const PARTIAL: i32 = 2;
    pub const FAILURE: i32 = 3;
}
