//! The `run` command: Monte Carlo sweeps written to a versioned run directory.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use tlqr_core::simulation::{reference_plan, run_monte_carlo, Episode, MonteCarloSummary, SimulationError};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const NOMINAL_FILE: &str = "nominal.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const STEP_TIMING_FILE: &str = "step_timing.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("cannot plan the reference trajectory: {0}")]
    Reference(SimulationError),
    #[error("cannot start the worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Complete,
    /// Some episodes failed or some grid points could not be run.
    Partial,
    /// No episode finished.
    Failed,
    /// The run directory already existed; nothing was written.
    Existing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub episodes: usize,
    pub failed_episodes: usize,
}

/// One row per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub value: f64,
    pub controller: usize,
    pub label: String,
    pub epsilon: f64,
    pub threshold: f64,
    pub control_horizon: Option<usize>,
    pub seed: u64,
    pub cost: f64,
    pub nominal_cost: f64,
    pub ratio: f64,
    pub replans: usize,
    pub solves: usize,
    pub nonconverged: usize,
    pub min_distance: Option<f64>,
    pub failure: Option<String>,
}

/// One row per (grid value, controller); timing lives in [`TimingRow`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub value: f64,
    pub controller: usize,
    pub label: String,
    pub epsilon: f64,
    pub threshold: f64,
    pub control_horizon: Option<usize>,
    pub episodes: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_ratio: f64,
    pub var_ratio: f64,
    pub mean_cost: f64,
    pub var_cost: f64,
    pub mean_replans: f64,
    pub se_replans: f64,
    pub nonconvergence_rate: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub value: f64,
    pub controller: usize,
    pub label: String,
    pub episodes: usize,
    pub mean_planning_time: f64,
    pub total_planning_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTimingRow {
    pub value: f64,
    pub controller: usize,
    pub seed: u64,
    pub t: usize,
    pub planning_time: f64,
}

/// First 12 hex digits of SHA-256 over the materialized config and the crate
/// version.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(config.to_toml().as_bytes());
    h.update(b"\0");
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

pub fn run_dir(config: &ExperimentConfig) -> PathBuf {
    config
        .output
        .directory
        .join(format!("{}-{}", config.name, config_hash(config)))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Table {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl Table {
    fn create(dir: &Path, name: &str) -> Result<Self, RunError> {
        let path = dir.join(name);
        let writer = csv::Writer::from_path(&path).map_err(|source| RunError::Csv {
            path: path.clone(),
            source,
        })?;
        Ok(Self { path, writer })
    }

    fn row<T: Serialize>(&mut self, row: &T) -> Result<(), RunError> {
        self.writer.serialize(row).map_err(|source| RunError::Csv {
            path: self.path.clone(),
            source,
        })
    }

    fn record<I, S>(&mut self, fields: I) -> Result<(), RunError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        let path = &self.path;
        self.writer.write_record(fields).map_err(|source| RunError::Csv {
            path: path.clone(),
            source,
        })
    }

    fn finish(mut self) -> Result<(), RunError> {
        let path = self.path.clone();
        self.writer.flush().map_err(io_err(&path))
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn state_control_columns(h: &mut Vec<String>, agents: usize) {
    for j in 0..agents {
        for f in ["x", "y", "theta", "phi"] {
            h.push(format!("a{j}_{f}"));
        }
    }
    for j in 0..agents {
        for f in ["v", "omega"] {
            h.push(format!("a{j}_{f}"));
        }
    }
}

/// Noise-free reference plan: state, control and stage cost per step.
fn nominal_header(agents: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    state_control_columns(&mut h, agents);
    h.push("cost".into());
    h
}

fn step_header(agents: usize) -> Vec<String> {
    let mut h: Vec<String> = ["value", "controller", "seed", "t"].iter().map(|s| s.to_string()).collect();
    state_control_columns(&mut h, agents);
    for j in 0..agents {
        for f in ["w_v", "w_omega"] {
            h.push(format!("a{j}_{f}"));
        }
    }
    h.push("cost".into());
    h.push("plan".into());
    h
}

/// Per-step rows of one episode: state, control, noise, stage cost and plan
/// reason; the final row carries the terminal state and cost.
fn step_rows(value: f64, controller: usize, episode: &Episode, agents: usize) -> Vec<Vec<String>> {
    let r = &episode.record;
    let nu = 2 * agents;
    let mut rows = Vec::with_capacity(r.states.len());
    for (t, x) in r.states.iter().enumerate() {
        let mut row = vec![num(value), controller.to_string(), r.spec.seed.to_string(), t.to_string()];
        row.extend(x.iter().map(|v| num(*v)));
        match (r.controls.get(t), r.noise.get(t)) {
            (Some(u), Some(w)) => {
                row.extend(u.iter().map(|v| num(*v)));
                row.extend(w.iter().map(|v| num(*v)));
                row.push(num(r.stage_costs[t]));
            }
            _ => {
                row.extend(std::iter::repeat(String::new()).take(2 * nu));
                row.push(if r.failed() { String::new() } else { num(r.terminal_cost) });
            }
        }
        let plan = r
            .plans
            .iter()
            .find(|(s, _)| *s == t)
            .map(|(_, reason)| format!("{reason:?}").to_lowercase())
            .unwrap_or_default();
        row.push(plan);
        rows.push(row);
    }
    rows
}

fn episode_row(value: f64, controller: usize, label: &str, e: &Episode) -> EpisodeRow {
    let r = &e.record;
    EpisodeRow {
        value,
        controller,
        label: label.to_string(),
        epsilon: r.spec.epsilon,
        threshold: r.spec.controller.threshold,
        control_horizon: r.spec.controller.control_horizon,
        seed: r.spec.seed,
        cost: r.cost,
        nominal_cost: r.nominal_cost,
        ratio: r.ratio(),
        replans: r.replans(),
        solves: r.solves(),
        nonconverged: r.nonconverged.len(),
        min_distance: r.min_distance,
        failure: r.failure.clone(),
    }
}

fn summary_row(value: f64, controller: usize, s: &MonteCarloSummary) -> SummaryRow {
    SummaryRow {
        value,
        controller,
        label: s.controller.clone(),
        epsilon: s.epsilon,
        threshold: s.threshold,
        control_horizon: s.control_horizon,
        episodes: s.episodes,
        failures: s.failures,
        failure_rate: s.failures as f64 / s.episodes as f64,
        mean_ratio: s.mean_ratio,
        var_ratio: s.var_ratio,
        mean_cost: s.mean_cost,
        var_cost: s.var_cost,
        mean_replans: s.mean_replans,
        se_replans: s.se_replans,
        nonconvergence_rate: s.nonconvergence_rate,
        error: None,
    }
}

/// Runs every (grid value, controller) point of `config`. With `workers`
/// unset the pool uses one thread per core.
pub fn run_experiment(config: &ExperimentConfig, workers: Option<usize>) -> Result<RunOutcome, RunError> {
    let dir = run_dir(config);
    if dir.exists() {
        return Ok(RunOutcome {
            dir,
            status: RunStatus::Existing,
            episodes: 0,
            failed_episodes: 0,
        });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;

    let scenario = config.to_scenario();
    let reference = reference_plan(&scenario).map_err(RunError::Reference)?;
    let nominal_cost = reference.cost;
    info!(
        "reference plan: J̄ = {nominal_cost} ({:?}, {} iterations)",
        reference.status, reference.iterations
    );

    let parent = &config.output.directory;
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let dir_name = dir.file_name().expect("run dir has a name").to_string_lossy().into_owned();
    let tmp = parent.join(format!(".{dir_name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;

    let config_path = tmp.join(CONFIG_FILE);
    fs::write(&config_path, config.to_toml()).map_err(io_err(&config_path))?;

    let agents = scenario.agents();
    let mut nominal = Table::create(&tmp, NOMINAL_FILE)?;
    nominal.record(nominal_header(agents))?;
    for (t, x) in reference.states.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(x.iter().map(|v| num(*v)));
        match reference.controls.get(t) {
            Some(u) => {
                row.extend(u.iter().map(|v| num(*v)));
                row.push(num(reference.stage_costs[t]));
            }
            None => {
                row.extend(std::iter::repeat(String::new()).take(2 * agents));
                row.push(num(reference.terminal_cost));
            }
        }
        nominal.record(&row)?;
    }
    nominal.finish()?;

    let mut summary = Table::create(&tmp, SUMMARY_FILE)?;
    let mut episodes_table = Table::create(&tmp, EPISODES_FILE)?;
    let mut timing = Table::create(&tmp, TIMING_FILE)?;
    let mut step_timing = Table::create(&tmp, STEP_TIMING_FILE)?;
    let mut steps = if config.output.steps {
        let mut t = Table::create(&tmp, STEPS_FILE)?;
        t.record(step_header(agents))?;
        Some(t)
    } else {
        None
    };

    let n = config.monte_carlo.episodes;
    let (mut total, mut failed) = (0usize, 0usize);
    let mut point_errors = 0usize;
    let points = config.sweep.values.len() * config.controllers.len();
    let mut done = 0usize;
    for &value in &config.sweep.values {
        for (c, controller) in config.controllers.iter().enumerate() {
            let spec = config.episode_spec(c, value);
            let label = controller.kind.label(agents);
            let result = pool.install(|| run_monte_carlo(&scenario, nominal_cost, &spec, n, config.monte_carlo.seed_base));
            done += 1;
            match result {
                Ok((episodes, s)) => {
                    info!(
                        "[{done}/{points}] {:?} = {value}, {label}: mean J/J̄ {:.4}, replans {:.2}, failures {}",
                        config.sweep.axis, s.mean_ratio, s.mean_replans, s.failures
                    );
                    total += episodes.len();
                    failed += s.failures;
                    summary.row(&summary_row(value, c, &s))?;
                    timing.row(&TimingRow {
                        value,
                        controller: c,
                        label: label.to_string(),
                        episodes: s.episodes,
                        mean_planning_time: s.mean_planning_time,
                        total_planning_time: s.total_planning_time,
                    })?;
                    for e in &episodes {
                        episodes_table.row(&episode_row(value, c, label, e))?;
                        for (t, &planning_time) in e.planning_time.iter().enumerate() {
                            step_timing.row(&StepTimingRow {
                                value,
                                controller: c,
                                seed: e.record.spec.seed,
                                t,
                                planning_time,
                            })?;
                        }
                        if let Some(steps) = steps.as_mut() {
                            for row in step_rows(value, c, e, agents) {
                                steps.record(&row)?;
                            }
                        }
                    }
                }
                Err(e) => {
                    warn!("[{done}/{points}] {:?} = {value}, {label}: {e}", config.sweep.axis);
                    point_errors += 1;
                    total += n;
                    failed += n;
                    summary.row(&SummaryRow {
                        value,
                        controller: c,
                        label: label.to_string(),
                        epsilon: spec.epsilon,
                        threshold: spec.controller.threshold,
                        control_horizon: spec.controller.control_horizon,
                        episodes: n,
                        failures: n,
                        failure_rate: 1.0,
                        mean_ratio: f64::NAN,
                        var_ratio: f64::NAN,
                        mean_cost: f64::NAN,
                        var_cost: f64::NAN,
                        mean_replans: f64::NAN,
                        se_replans: f64::NAN,
                        nonconvergence_rate: f64::NAN,
                        error: Some(e.to_string()),
                    })?;
                }
            }
        }
    }
    summary.finish()?;
    episodes_table.finish()?;
    timing.finish()?;
    step_timing.finish()?;
    if let Some(steps) = steps {
        steps.finish()?;
    }
    fs::rename(&tmp, &dir).map_err(io_err(&dir))?;

    let status = if failed == total {
        RunStatus::Failed
    } else if failed > 0 || point_errors > 0 {
        RunStatus::Partial
    } else {
        RunStatus::Complete
    };
    Ok(RunOutcome {
        dir,
        status,
        episodes: total,
        failed_episodes: failed,
    })
}
