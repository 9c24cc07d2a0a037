//! Seeded closed-loop episodes, Monte Carlo aggregation over noise
//! realizations, and planning-time profiles.

mod dp;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{Controller, ControllerConfig, ControllerError, ControllerEvent, ReplanReason};
use crate::costs::min_pairwise_distance;
use crate::dynamics::{AgentSystem, ControlVec, NoiseModel, StateVec};
use crate::scenario::Scenario;
use crate::trajopt::{solve_ocp, NominalPlan, OcpProblem, SolveError};

pub use dp::{high_noise_dp_check, DpPoint, DpProblem, DpReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error("invalid episode specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("reference plan: {0}")]
    Reference(SolveError),
    #[error("record is inconsistent: {0}")]
    Record(String),
}

/// One closed-loop run: which controller, how much noise, which seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub controller: ControllerConfig,
    /// Noise scale ε.
    pub epsilon: f64,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self, scenario: &Scenario) -> Result<(), SimulationError> {
        if scenario.horizon == 0 {
            return Err(SimulationError::InvalidSpec("horizon must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(SimulationError::InvalidSpec(format!(
                "epsilon must be finite and nonnegative, got {}",
                self.epsilon
            )));
        }
        self.controller.validate()?;
        Ok(())
    }
}

/// Noise-free one-shot plan over the full episode from `x₀`; its cost is the
/// normalizer `J̄` of every episode on the scenario.
pub fn reference_plan(scenario: &Scenario) -> Result<NominalPlan, SimulationError> {
    let problem = OcpProblem {
        x0: scenario.x0.clone(),
        horizon: scenario.horizon,
        u_init: ControlVec::zeros(scenario.system.control_dim()),
        system: &scenario.system,
        cost: &scenario.cost,
    };
    solve_ocp(&problem, None, &scenario.solver).map_err(SimulationError::Reference)
}

/// Unscaled actuator noise `w_t = u_max ⊙ ν` for every agent at step `t`.
///
/// Each `(seed, t, agent)` triple keys its own generator, so draws do not
/// depend on how many were taken before and every controller sees the same
/// sequence for a given seed.
pub fn noise_at(system: &AgentSystem, seed: u64, t: usize) -> ControlVec {
    let mut w = ControlVec::zeros(system.control_dim());
    for (j, limits) in system.limits.iter().enumerate() {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&(t as u64).to_le_bytes());
        key[16..24].copy_from_slice(&(j as u64).to_le_bytes());
        let wj = NoiseModel::new(1.0, limits.u_max).sample(&mut ChaCha8Rng::from_seed(key));
        w[2 * j] = wj[0];
        w[2 * j + 1] = wj[1];
    }
    w
}

/// Everything that happened in one episode except wall-clock timing, which
/// lives in [`Episode::planning_time`] so that records are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub spec: EpisodeSpec,
    /// `x_0..x_T`; shorter when the episode failed.
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Unscaled noise `w_t`; the dynamics received `u_t + ε w_t`.
    pub noise: Vec<Vec<f64>>,
    pub stage_costs: Vec<f64>,
    pub terminal_cost: f64,
    /// Executed cost `J`.
    pub cost: f64,
    /// Noise-free optimal cost `J̄` from `x₀`.
    pub nominal_cost: f64,
    /// Steps at which a plan was computed, with the reason.
    pub plans: Vec<(usize, ReplanReason)>,
    pub nonconverged: Vec<usize>,
    pub degenerate: Vec<usize>,
    /// Smallest inter-agent distance over the executed states.
    pub min_distance: Option<f64>,
    pub failure: Option<String>,
}

impl RolloutRecord {
    pub fn ratio(&self) -> f64 {
        self.cost / self.nominal_cost
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Plans after the first one; every plan for receding-horizon controllers.
    pub fn replans(&self) -> usize {
        self.plans.iter().filter(|(_, r)| *r != ReplanReason::Initial).count()
    }

    pub fn replan_steps(&self) -> Vec<usize> {
        self.plans
            .iter()
            .filter(|(_, r)| *r != ReplanReason::Initial)
            .map(|(t, _)| *t)
            .collect()
    }

    pub fn solves(&self) -> usize {
        self.plans.len()
    }

    pub fn planned_at(&self, t: usize) -> bool {
        self.plans.iter().any(|(s, _)| *s == t)
    }

    /// Re-simulates the states from `x₀`, the logged controls and noise.
    pub fn replay_states(&self, system: &AgentSystem) -> Result<Vec<Vec<f64>>, SimulationError> {
        let first = self.states.first().ok_or_else(|| SimulationError::Record("no states".into()))?;
        let mut x = StateVec::from_column_slice(first);
        let mut out = vec![first.clone()];
        for (u, w) in self.controls.iter().zip(&self.noise).take(self.states.len() - 1) {
            let (u, w) = (ControlVec::from_column_slice(u), ControlVec::from_column_slice(w));
            x = system
                .step_noisy(&x, &u, &w, self.spec.epsilon)
                .map_err(|e| SimulationError::Record(e.to_string()))?;
            out.push(x.as_slice().to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub record: RolloutRecord,
    /// Wall time spent planning at each step [s].
    pub planning_time: Vec<f64>,
}

impl Episode {
    pub fn total_planning_time(&self) -> f64 {
        self.planning_time.iter().sum()
    }
}

/// Runs one episode, calling `inspect` after each controller step with the
/// controller, the step and the measured state.
pub fn run_episode_inspected<F>(
    scenario: &Scenario,
    nominal_cost: f64,
    spec: &EpisodeSpec,
    mut inspect: F,
) -> Result<Episode, SimulationError>
where
    F: FnMut(&Controller<'_>, usize, &StateVec),
{
    spec.validate(scenario)?;
    let system = &scenario.system;
    let mut controller = Controller::new(scenario, spec.controller)?;
    let mut x = scenario.x0.clone();
    let mut record = RolloutRecord {
        spec: *spec,
        states: vec![x.as_slice().to_vec()],
        controls: Vec::new(),
        noise: Vec::new(),
        stage_costs: Vec::new(),
        terminal_cost: f64::NAN,
        cost: f64::NAN,
        nominal_cost,
        plans: Vec::new(),
        nonconverged: Vec::new(),
        degenerate: Vec::new(),
        min_distance: None,
        failure: None,
    };
    let mut planning_time = Vec::with_capacity(scenario.horizon);

    for t in 0..scenario.horizon {
        let out = match controller.step(t, &x) {
            Ok(out) => out,
            Err(e) => {
                record.failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        inspect(&controller, t, &x);
        if let Some(reason) = out.planned {
            record.plans.push((t, reason));
        }
        planning_time.push(out.planning_time);
        let w = noise_at(system, spec.seed, t);
        let next = match system.step_noisy(&x, &out.control, &w, spec.epsilon) {
            Ok(next) => next,
            Err(e) => {
                record.failure = Some(format!("step {t}: {e}"));
                break;
            }
        };
        record.stage_costs.push(scenario.cost.stage(&x, &out.control));
        controller.observe(t, &x, &out.control, &next);
        record.controls.push(out.control.as_slice().to_vec());
        record.noise.push(w.as_slice().to_vec());
        record.states.push(next.as_slice().to_vec());
        x = next;
    }

    for event in controller.events() {
        match event {
            ControllerEvent::NonConverged { step } => record.nonconverged.push(*step),
            ControllerEvent::DegenerateBaseline { step } => record.degenerate.push(*step),
            ControllerEvent::Plan { .. } => {}
        }
    }
    if scenario.agents() > 1 {
        record.min_distance = record
            .states
            .iter()
            .map(|s| min_pairwise_distance(&StateVec::from_column_slice(s), scenario.agents()))
            .reduce(f64::min);
    }
    if record.failure.is_none() {
        record.terminal_cost = scenario.cost.terminal(&x);
        record.cost = record.stage_costs.iter().sum::<f64>() + record.terminal_cost;
    }
    Ok(Episode { record, planning_time })
}

pub fn run_episode(scenario: &Scenario, nominal_cost: f64, spec: &EpisodeSpec) -> Result<Episode, SimulationError> {
    run_episode_inspected(scenario, nominal_cost, spec, |_, _, _| {})
}

/// Statistics over the episodes of one configuration point. Failed episodes
/// only enter the failure rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub controller: String,
    pub epsilon: f64,
    pub threshold: f64,
    pub control_horizon: Option<usize>,
    pub episodes: usize,
    pub failures: usize,
    pub mean_ratio: f64,
    pub var_ratio: f64,
    pub mean_cost: f64,
    pub var_cost: f64,
    pub mean_replans: f64,
    /// Standard error of the mean replan count.
    pub se_replans: f64,
    pub mean_planning_time: f64,
    pub total_planning_time: f64,
    pub nonconvergence_rate: f64,
}

/// Sample mean and unbiased variance; the variance of a single value is 0.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, ss / (n - 1) as f64)
}

pub fn summarize(agents: usize, episodes: &[Episode]) -> MonteCarloSummary {
    let spec = episodes.first().map(|e| e.record.spec);
    let ok: Vec<&RolloutRecord> = episodes.iter().map(|e| &e.record).filter(|r| !r.failed()).collect();
    let ratios: Vec<f64> = ok.iter().map(|r| r.ratio()).collect();
    let costs: Vec<f64> = ok.iter().map(|r| r.cost).collect();
    let replans: Vec<f64> = ok.iter().map(|r| r.replans() as f64).collect();
    let (mean_ratio, var_ratio) = mean_var(&ratios);
    let (mean_cost, var_cost) = mean_var(&costs);
    let (mean_replans, var_replans) = mean_var(&replans);
    let times: Vec<f64> = episodes.iter().map(Episode::total_planning_time).collect();
    let total_planning_time: f64 = times.iter().sum();
    let solves: usize = episodes.iter().map(|e| e.record.solves()).sum();
    let nonconverged: usize = episodes.iter().map(|e| e.record.nonconverged.len()).sum();
    let n = episodes.len();
    MonteCarloSummary {
        controller: spec.map_or_else(String::new, |s| s.controller.kind.label(agents).to_string()),
        epsilon: spec.map_or(f64::NAN, |s| s.epsilon),
        threshold: spec.map_or(f64::NAN, |s| s.controller.threshold),
        control_horizon: spec.and_then(|s| s.controller.control_horizon),
        episodes: n,
        failures: n - ok.len(),
        mean_ratio,
        var_ratio,
        mean_cost,
        var_cost,
        mean_replans,
        se_replans: (var_replans / replans.len() as f64).sqrt(),
        mean_planning_time: total_planning_time / n as f64,
        total_planning_time,
        nonconvergence_rate: if solves == 0 { 0.0 } else { nonconverged as f64 / solves as f64 },
    }
}

/// Runs episodes with seeds `seed_base..seed_base + n` in parallel on the
/// current rayon pool. Results come back in seed order.
pub fn run_monte_carlo(
    scenario: &Scenario,
    nominal_cost: f64,
    template: &EpisodeSpec,
    n: usize,
    seed_base: u64,
) -> Result<(Vec<Episode>, MonteCarloSummary), SimulationError> {
    if n == 0 {
        return Err(SimulationError::InvalidSpec("at least one episode is required".into()));
    }
    template.validate(scenario)?;
    let episodes = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let spec = EpisodeSpec {
                seed: seed_base.wrapping_add(i),
                ..*template
            };
            run_episode(scenario, nominal_cost, &spec)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = summarize(scenario.agents(), &episodes);
    Ok((episodes, summary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    Threshold,
    Horizon,
}

impl SweepAxis {
    /// Applies a grid value to one episode template. Threshold values only
    /// affect triggered controllers and horizon values only short-horizon
    /// ones.
    pub fn apply(self, spec: &EpisodeSpec, value: f64) -> Result<EpisodeSpec, SimulationError> {
        let mut out = *spec;
        match self {
            SweepAxis::Epsilon => out.epsilon = value,
            SweepAxis::Threshold => {
                if out.controller.kind.uses_trigger() {
                    out.controller.threshold = value;
                }
            }
            SweepAxis::Horizon => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(SimulationError::InvalidSpec(format!(
                        "horizon grid values must be positive integers, got {value}"
                    )));
                }
                if out.controller.kind.is_short_horizon() {
                    out.controller.control_horizon = Some(value as usize);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub controller: usize,
    pub episodes: Vec<Episode>,
    pub summary: MonteCarloSummary,
}

/// One Monte Carlo run per (grid value, controller); every point reuses the
/// same seed bank so controllers are compared on identical noise.
pub fn sweep(
    scenario: &Scenario,
    nominal_cost: f64,
    axis: SweepAxis,
    grid: &[f64],
    templates: &[EpisodeSpec],
    n: usize,
    seed_base: u64,
) -> Result<Vec<SweepPoint>, SimulationError> {
    if grid.is_empty() || templates.is_empty() {
        return Err(SimulationError::InvalidSpec("sweep grid and controller list must be nonempty".into()));
    }
    let mut points = Vec::with_capacity(grid.len() * templates.len());
    for &value in grid {
        for (c, template) in templates.iter().enumerate() {
            let spec = axis.apply(template, value)?;
            let (episodes, summary) = run_monte_carlo(scenario, nominal_cost, &spec, n, seed_base)?;
            points.push(SweepPoint {
                value,
                controller: c,
                episodes,
                summary,
            });
        }
    }
    Ok(points)
}

/// Mean planning time at each step over a set of episodes of one controller.
pub fn timing_profile(episodes: &[Episode]) -> Vec<f64> {
    let horizon = episodes.iter().map(|e| e.planning_time.len()).max().unwrap_or(0);
    (0..horizon)
        .map(|t| {
            let n = episodes.len() as f64;
            episodes.iter().filter_map(|e| e.planning_time.get(t)).sum::<f64>() / n
        })
        .collect()
}
