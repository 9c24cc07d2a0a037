use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use tlqr_cli::check::run_checks;
use tlqr_cli::{exit, load_config, run_experiment, write_report, RunStatus};

#[derive(Parser)]
#[command(name = "tlqr", version, about = "Decoupled stochastic motion planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        config: PathBuf,
        /// First episode seed; overrides `monte_carlo.seed_base`.
        #[arg(long)]
        seed_base: Option<u64>,
        /// Worker threads for episodes (default: one per core).
        #[arg(long)]
        workers: Option<usize>,
        /// Parent directory for run directories; overrides `output.directory`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write plot-ready series for a run directory.
    Report { dir: PathBuf },
    /// Run the built-in oracle and invariant checks.
    Check,
}

fn run(config: PathBuf, seed_base: Option<u64>, workers: Option<usize>, output: Option<PathBuf>) -> i32 {
    let mut cfg = match load_config(&config) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return exit::CONFIG;
        }
    };
    if let Some(s) = seed_base {
        cfg.monte_carlo.seed_base = s;
    }
    if let Some(o) = output {
        cfg.output.directory = o;
    }
    if workers == Some(0) {
        error!("--workers must be at least 1");
        return exit::CONFIG;
    }
    match run_experiment(&cfg, workers) {
        Ok(outcome) => match outcome.status {
            RunStatus::Existing => {
                info!("{} already exists; remove it to run again", outcome.dir.display());
                exit::SUCCESS
            }
            RunStatus::Complete => {
                info!("{} episodes written to {}", outcome.episodes, outcome.dir.display());
                exit::SUCCESS
            }
            RunStatus::Partial => {
                error!(
                    "{} of {} episodes failed; results in {}",
                    outcome.failed_episodes,
                    outcome.episodes,
                    outcome.dir.display()
                );
                exit::PARTIAL
            }
            RunStatus::Failed => {
                error!("every episode failed; records in {}", outcome.dir.display());
                exit::FAILURE
            }
        },
        Err(e) => {
            error!("{e}");
            exit::FAILURE
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = match Cli::parse().command {
        Command::Run {
            config,
            seed_base,
            workers,
            output,
        } => run(config, seed_base, workers, output),
        Command::Report { dir } => match write_report(&dir) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                exit::SUCCESS
            }
            Err(e) => {
                error!("{e}");
                exit::FAILURE
            }
        },
        Command::Check => {
            let results = run_checks();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                exit::SUCCESS
            } else {
                exit::FAILURE
            }
        }
    };
    ExitCode::from(code as u8)
}
