//! Experiment files: parsing, validation and the materialized echo.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use tlqr_core::controllers::ControllerConfig;
use tlqr_core::costs::{CollisionPenaltyParams, CostModel, CostWeights};
use tlqr_core::dynamics::{stack_agents, AgentSystem, CarParams, ControlLimits, STEERING_GUARD};
use tlqr_core::feedback::LqrWeights;
use tlqr_core::scenario::Scenario;
use tlqr_core::simulation::{EpisodeSpec, SweepAxis};
use tlqr_core::trajopt::SolverSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run name; prefixes the output directory.
    pub name: String,
    pub scenario: ScenarioConfig,
    pub controllers: Vec<ControllerConfig>,
    pub sweep: SweepConfig,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Episode length `T` in steps.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub car: CarParams,
    #[serde(default)]
    pub limits: ControlLimits,
    /// Diagonal cost weights, shared by all agents.
    #[serde(default)]
    pub weights: DiagonalWeights,
    /// Pairwise collision penalty; defaults on with two or more agents.
    #[serde(default)]
    pub collision: Option<CollisionPenaltyParams>,
    /// Diagonal tracking weights; default to `weights`.
    #[serde(default)]
    pub lqr: Option<DiagonalWeights>,
    pub agents: Vec<AgentConfig>,
}

fn default_horizon() -> usize {
    35
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagonalWeights {
    pub state: [f64; 4],
    pub control: [f64; 2],
    pub terminal: [f64; 4],
}

impl Default for DiagonalWeights {
    fn default() -> Self {
        Self {
            state: [5.0, 5.0, 1.0, 0.1],
            control: [1.0, 1.0],
            terminal: [500.0, 500.0, 100.0, 10.0],
        }
    }
}

impl DiagonalWeights {
    fn validate(&self, field: &str) -> Result<(), ConfigError> {
        let nonneg = |v: &[f64]| v.iter().all(|w| w.is_finite() && *w >= 0.0);
        if !nonneg(&self.state) {
            return Err(invalid(format!("{field}.state"), "entries must be finite and nonnegative"));
        }
        if !nonneg(&self.terminal) {
            return Err(invalid(format!("{field}.terminal"), "entries must be finite and nonnegative"));
        }
        if !self.control.iter().all(|w| w.is_finite() && *w > 0.0) {
            return Err(invalid(format!("{field}.control"), "entries must be finite and positive"));
        }
        Ok(())
    }

    fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        (diag(&self.state), diag(&self.control), diag(&self.terminal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    /// Initial state `(x, y, θ, φ)`.
    pub start: [f64; 4],
    pub goal: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Noise scale used when the axis is not `epsilon`.
    #[serde(default)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub episodes: usize,
    pub seed_base: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            seed_base: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent directory of run directories.
    pub directory: PathBuf,
    /// Also write the per-step table of every episode.
    pub steps: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("results"),
            steps: true,
        }
    }
}

/// Reads, validates and materializes a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text).map_err(|e| match e {
        ConfigError::Parse { message, .. } => ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: PathBuf::from("<string>"),
        message: e.to_string(),
    })?;
    config.materialize()
}

impl ExperimentConfig {
    /// Fills every optional block with the value actually used, then validates.
    pub fn materialize(mut self) -> Result<Self, ConfigError> {
        if self.scenario.collision.is_none() && self.scenario.agents.len() > 1 {
            self.scenario.collision = Some(CollisionPenaltyParams::default());
        }
        if self.scenario.lqr.is_none() {
            self.scenario.lqr = Some(self.scenario.weights);
        }
        if self.sweep.axis != SweepAxis::Epsilon && self.sweep.epsilon.is_none() {
            self.sweep.epsilon = Some(0.0);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let name_ok = !self.name.is_empty()
            && self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
        if !name_ok {
            return Err(invalid("name", "must be nonempty and use only letters, digits, '-', '_' and '.'"));
        }

        let s = &self.scenario;
        if s.horizon == 0 {
            return Err(invalid("scenario.horizon", "must be at least 1"));
        }
        s.car.validate().map_err(|e| invalid("scenario.car", e.to_string()))?;
        s.limits.validate().map_err(|e| invalid("scenario.limits", e.to_string()))?;
        s.weights.validate("scenario.weights")?;
        if let Some(lqr) = &s.lqr {
            lqr.validate("scenario.lqr")?;
        }
        if s.agents.is_empty() {
            return Err(invalid("scenario.agents", "at least one agent is required"));
        }
        let phi_limit = std::f64::consts::FRAC_PI_2 - STEERING_GUARD;
        for (i, a) in s.agents.iter().enumerate() {
            if !a.start.iter().all(|v| v.is_finite()) || a.start[3].abs() >= phi_limit {
                return Err(invalid(
                    format!("scenario.agents[{i}].start"),
                    "must be finite with a steering angle inside (-π/2, π/2)",
                ));
            }
            if !a.goal.iter().all(|v| v.is_finite()) {
                return Err(invalid(format!("scenario.agents[{i}].goal"), "must be finite"));
            }
        }
        match (&s.collision, s.agents.len()) {
            (Some(_), 1) => {
                return Err(invalid("scenario.collision", "needs at least two agents"));
            }
            (Some(c), _) => c.validate().map_err(|e| invalid("scenario.collision", e.to_string()))?,
            (None, _) => {}
        }

        if self.controllers.is_empty() {
            return Err(invalid("controllers", "at least one controller is required"));
        }
        for (i, c) in self.controllers.iter().enumerate() {
            if !(c.threshold >= 0.0 && c.threshold.is_finite()) {
                return Err(invalid(format!("controllers[{i}].threshold"), "must be finite and nonnegative"));
            }
            if c.control_horizon == Some(0) {
                return Err(invalid(format!("controllers[{i}].control_horizon"), "must be at least 1"));
            }
            if c.kind.is_short_horizon() && c.control_horizon.is_none() {
                return Err(invalid(
                    format!("controllers[{i}].control_horizon"),
                    "is required for short-horizon controllers",
                ));
            }
            c.validate().map_err(|e| invalid(format!("controllers[{i}]"), e.to_string()))?;
        }

        let sw = &self.sweep;
        if sw.values.is_empty() {
            return Err(invalid("sweep.values", "must be nonempty"));
        }
        for (i, &v) in sw.values.iter().enumerate() {
            let field = format!("sweep.values[{i}]");
            let ok = match sw.axis {
                SweepAxis::Epsilon | SweepAxis::Threshold => v.is_finite() && v >= 0.0,
                SweepAxis::Horizon => v >= 1.0 && v.fract() == 0.0 && v.is_finite(),
            };
            if !ok {
                let msg = match sw.axis {
                    SweepAxis::Horizon => "horizon values must be positive integers",
                    _ => "must be finite and nonnegative",
                };
                return Err(invalid(field, msg));
            }
        }
        match (sw.axis, sw.epsilon) {
            (SweepAxis::Epsilon, Some(_)) => {
                return Err(invalid("sweep.epsilon", "only applies to threshold and horizon sweeps"));
            }
            (_, Some(e)) if !(e.is_finite() && e >= 0.0) => {
                return Err(invalid("sweep.epsilon", "must be finite and nonnegative"));
            }
            _ => {}
        }

        if self.monte_carlo.episodes == 0 {
            return Err(invalid("monte_carlo.episodes", "must be at least 1"));
        }
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        if self.output.directory.as_os_str().is_empty() {
            return Err(invalid("output.directory", "must be nonempty"));
        }
        Ok(())
    }

    /// TOML text of the config with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn to_scenario(&self) -> Scenario {
        let s = &self.scenario;
        let agents = s.agents.len();
        let (state, control, terminal) = s.weights.matrices();
        let per_agent: Vec<CostWeights> = s
            .agents
            .iter()
            .map(|a| CostWeights {
                state: state.clone(),
                control: control.clone(),
                terminal: terminal.clone(),
                goal: DVector::from_column_slice(&a.goal),
            })
            .collect();
        let system = AgentSystem::homogeneous(agents, s.car, s.limits);
        let cost = CostModel::new(CostWeights::stack(&per_agent), s.collision, agents);
        let starts: Vec<DVector<f64>> = s.agents.iter().map(|a| DVector::from_column_slice(&a.start)).collect();
        let x0 = stack_agents(&starts).expect("agent states have equal size");
        let mut scenario = Scenario::new(system, cost, x0, s.horizon, self.solver);
        if let Some(lqr) = &s.lqr {
            let (q, r, q_f) = lqr.matrices();
            scenario.lqr = vec![LqrWeights { q, r, q_f }; agents];
        }
        scenario
    }

    /// Noise scale used at a grid point.
    pub fn epsilon_at(&self, value: f64) -> f64 {
        match self.sweep.axis {
            SweepAxis::Epsilon => value,
            _ => self.sweep.epsilon.unwrap_or(0.0),
        }
    }

    /// Episode template of controller `c` at a grid point; the seed is filled
    /// in per episode.
    pub fn episode_spec(&self, c: usize, value: f64) -> EpisodeSpec {
        let base = EpisodeSpec {
            controller: self.controllers[c],
            epsilon: self.epsilon_at(value),
            seed: self.monte_carlo.seed_base,
        };
        self.sweep
            .axis
            .apply(&base, value)
            .expect("grid values are validated with the config")
    }
}
