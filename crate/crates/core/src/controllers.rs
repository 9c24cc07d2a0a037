//! Receding-horizon and trajectory-tracking controllers behind one stepwise
//! interface.
//!
//! A controller is driven by the simulation loop in two calls per step:
//! [`Controller::step`] returns the constrained control for the measured
//! state, and [`Controller::observe`] books the executed cost once the next
//! state is known. Replanning decided in `observe` is carried out at the
//! start of the following `step`, so its planning time is charged there.
//!
//! The replanning trigger compares cumulative costs since the start of the
//! episode. The nominal side is stitched together from the executed costs
//! before the active plan and the active plan's own prefix, so the deviation
//! in the numerator only accumulates since the last replan while the
//! denominator stays on the scale of the whole episode. Both sides include a
//! one-step lookahead: the state cost at the state just reached, or the
//! terminal cost at the end of a plan.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlVec, StateVec, AGENT_CONTROL_DIM, AGENT_STATE_DIM};
use crate::feedback::{decoupled_gains, FeedbackError, GainSchedule};
use crate::scenario::Scenario;
use crate::trajopt::{solve_ocp, NominalPlan, OcpProblem, SolveError};

pub use crate::trajopt::constrain;

/// Nominal costs at or below this are treated as a degenerate baseline.
pub const DEGENERATE_BASELINE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error("step {step} is outside the episode horizon {horizon}")]
    OutOfRange { step: usize, horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ControllerKind {
    #[serde(rename = "MPC")]
    Mpc,
    #[serde(rename = "MPC_SH")]
    MpcSh,
    #[serde(rename = "TLQR")]
    Tlqr,
    #[serde(rename = "TLQR2")]
    Tlqr2,
    #[serde(rename = "TLQR2_SH")]
    Tlqr2Sh,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [Self::Mpc, Self::MpcSh, Self::Tlqr, Self::Tlqr2, Self::Tlqr2Sh];

    pub fn is_receding(self) -> bool {
        matches!(self, Self::Mpc | Self::MpcSh)
    }

    pub fn is_short_horizon(self) -> bool {
        matches!(self, Self::MpcSh | Self::Tlqr2Sh)
    }

    pub fn uses_trigger(self) -> bool {
        matches!(self, Self::Tlqr2 | Self::Tlqr2Sh)
    }

    /// Display name; tracking controllers get the `MT-` prefix with several agents.
    pub fn label(self, agents: usize) -> &'static str {
        let multi = agents > 1;
        match (self, multi) {
            (Self::Mpc, _) => "MPC",
            (Self::MpcSh, _) => "MPC-SH",
            (Self::Tlqr, false) => "T-LQR",
            (Self::Tlqr, true) => "MT-LQR",
            (Self::Tlqr2, false) => "T-LQR2",
            (Self::Tlqr2, true) => "MT-LQR2",
            (Self::Tlqr2Sh, false) => "T-LQR2-SH",
            (Self::Tlqr2Sh, true) => "MT-LQR2-SH",
        }
    }
}

fn default_threshold() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Planning horizon `H_c` of the short-horizon variants. Values at or
    /// above the episode length make them plan over the full remainder.
    #[serde(default)]
    pub control_horizon: Option<usize>,
    /// Relative cost deviation that fires a replan (T-LQR2 variants).
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind) -> Self {
        Self {
            kind,
            control_horizon: None,
            threshold: default_threshold(),
        }
    }

    pub fn with_horizon(mut self, h: usize) -> Self {
        self.control_horizon = Some(h);
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.control_horizon == Some(0) {
            return Err(ControllerError::Config("control_horizon must be at least 1".into()));
        }
        if self.kind.is_short_horizon() && self.control_horizon.is_none() {
            return Err(ControllerError::Config(format!(
                "control_horizon is required for {:?}",
                self.kind
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(ControllerError::Config("threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Fire,
    Hold,
    /// The nominal cost is too small to divide by; never fires.
    Degenerate,
}

/// Fires when `|J_t − J̄_t| / J̄_t > J_thresh`.
pub fn replan_trigger(j: f64, j_bar: f64, threshold: f64) -> Trigger {
    if j_bar <= DEGENERATE_BASELINE {
        return Trigger::Degenerate;
    }
    if (j - j_bar).abs() / j_bar > threshold {
        Trigger::Fire
    } else {
        Trigger::Hold
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplanReason {
    Initial,
    Receding,
    Trigger,
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControllerEvent {
    Plan { step: usize, reason: ReplanReason, iterations: usize },
    NonConverged { step: usize },
    DegenerateBaseline { step: usize },
}

/// Result of one controller step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub control: ControlVec,
    /// Wall time spent in trajectory optimization and gain synthesis [s].
    pub planning_time: f64,
    pub planned: Option<ReplanReason>,
}

/// Running comparison between executed and nominal cost after a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostCheck {
    pub executed: f64,
    pub nominal: f64,
    pub trigger: Trigger,
}

#[derive(Debug, Clone)]
struct ActivePlan {
    start: usize,
    plan: NominalPlan,
    /// Per-agent schedules; empty for receding-horizon controllers.
    gains: Vec<GainSchedule>,
}

#[derive(Debug, Clone)]
pub struct Controller<'s> {
    scenario: &'s Scenario,
    config: ControllerConfig,
    active: Option<ActivePlan>,
    pending: Option<ReplanReason>,
    last_control: ControlVec,
    cost_before_plan: f64,
    cost_since_plan: f64,
    solves: usize,
    events: Vec<ControllerEvent>,
}

impl<'s> Controller<'s> {
    pub fn new(scenario: &'s Scenario, config: ControllerConfig) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            scenario,
            config,
            active: None,
            pending: None,
            last_control: ControlVec::zeros(scenario.system.control_dim()),
            cost_before_plan: 0.0,
            cost_since_plan: 0.0,
            solves: 0,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    /// Number of trajectory optimizations so far.
    pub fn solves(&self) -> usize {
        self.solves
    }

    pub fn events(&self) -> &[ControllerEvent] {
        &self.events
    }

    /// The plan currently being executed or tracked.
    pub fn active_plan(&self) -> Option<&NominalPlan> {
        self.active.as_ref().map(|a| &a.plan)
    }

    fn plan_length(&self, t: usize) -> usize {
        let remaining = self.scenario.horizon - t;
        match self.config.control_horizon {
            Some(h) if self.config.kind.is_short_horizon() => h.min(remaining),
            _ => remaining,
        }
    }

    /// Remainder of the active plan from step `t`, resized to `len` by
    /// truncation or by repeating its last control.
    fn shifted_guess(&self, t: usize, len: usize) -> Option<Vec<ControlVec>> {
        let active = self.active.as_ref()?;
        let offset = t.checked_sub(active.start)?;
        let mut guess: Vec<ControlVec> = active.plan.controls.iter().skip(offset).take(len).cloned().collect();
        let fill = guess.last().cloned().or_else(|| active.plan.controls.last().cloned())?;
        guess.resize(len, fill);
        Some(guess)
    }

    fn plan(&mut self, t: usize, x: &StateVec, reason: ReplanReason) -> Result<f64, ControllerError> {
        let len = self.plan_length(t);
        let guess = self.shifted_guess(t, len);
        let problem = OcpProblem {
            x0: x.clone(),
            horizon: len,
            u_init: self.last_control.clone(),
            system: &self.scenario.system,
            cost: &self.scenario.cost,
        };
        let clock = Instant::now();
        let plan = solve_ocp(&problem, guess.as_deref(), &self.scenario.solver)?;
        let gains = if self.config.kind.is_receding() {
            Vec::new()
        } else {
            decoupled_gains(&plan, &self.scenario.system, &self.scenario.lqr)?
        };
        let elapsed = clock.elapsed().as_secs_f64();

        self.solves += 1;
        self.events.push(ControllerEvent::Plan {
            step: t,
            reason,
            iterations: plan.iterations,
        });
        if !plan.converged() {
            self.events.push(ControllerEvent::NonConverged { step: t });
        }
        self.cost_before_plan += self.cost_since_plan;
        self.cost_since_plan = 0.0;
        self.active = Some(ActivePlan { start: t, plan, gains });
        Ok(elapsed)
    }

    /// Tracking law `ū − L(x − x̄)` of the active plan at step `t`, applied
    /// agent by agent and not yet constrained.
    pub fn tracking_control(&self, t: usize, x: &StateVec) -> Option<ControlVec> {
        let active = self.active.as_ref()?;
        let k = t.checked_sub(active.start)?;
        if active.gains.is_empty() || k >= active.plan.horizon() {
            return None;
        }
        let (x_bar, u_bar) = (&active.plan.states[k], &active.plan.controls[k]);
        let mut u = u_bar.clone();
        for (j, schedule) in active.gains.iter().enumerate() {
            let (sx, su) = (AGENT_STATE_DIM * j, AGENT_CONTROL_DIM * j);
            let dx = x.rows(sx, AGENT_STATE_DIM) - x_bar.rows(sx, AGENT_STATE_DIM);
            let du = &schedule.gains[k] * dx;
            for i in 0..AGENT_CONTROL_DIM {
                u[su + i] -= du[i];
            }
        }
        Some(u)
    }

    /// Control for the measured state `x` at step `t`, within the box and
    /// rate limits relative to the previously applied control.
    pub fn step(&mut self, t: usize, x: &StateVec) -> Result<StepOutcome, ControllerError> {
        let horizon = self.scenario.horizon;
        if t >= horizon {
            return Err(ControllerError::OutOfRange { step: t, horizon });
        }
        let mut planning_time = 0.0;
        let planned = if self.config.kind.is_receding() {
            Some(ReplanReason::Receding)
        } else if self.active.is_none() {
            Some(ReplanReason::Initial)
        } else {
            self.pending.take()
        };
        if let Some(reason) = planned {
            planning_time = self.plan(t, x, reason)?;
        }

        let raw = if self.config.kind.is_receding() {
            self.active.as_ref().expect("planned above").plan.controls[0].clone()
        } else {
            self.tracking_control(t, x).ok_or(ControllerError::OutOfRange { step: t, horizon })?
        };
        let control = constrain(&raw, &self.last_control, &self.scenario.system);
        self.last_control = control.clone();
        Ok(StepOutcome {
            control,
            planning_time,
            planned,
        })
    }

    /// Books the executed stage cost of step `t` and, for the triggered
    /// variants, decides whether to replan from `x_next`.
    pub fn observe(&mut self, t: usize, x: &StateVec, u: &ControlVec, x_next: &StateVec) -> Option<CostCheck> {
        let cost = &self.scenario.cost;
        self.cost_since_plan += cost.stage(x, u);
        let active = self.active.as_ref()?;
        if self.config.kind.is_receding() || t + 1 >= self.scenario.horizon {
            return None;
        }
        let k = t - active.start;
        let plan = &active.plan;
        let at_plan_end = k + 1 == plan.horizon();
        if at_plan_end && self.config.kind == ControllerKind::Tlqr2Sh {
            self.pending = Some(ReplanReason::Exhausted);
            return None;
        }
        let (look_exec, look_nom) = if at_plan_end {
            (cost.terminal(x_next), plan.terminal_cost)
        } else {
            (cost.state_part(x_next), cost.state_part(&plan.states[k + 1]))
        };
        let executed = self.cost_before_plan + self.cost_since_plan + look_exec;
        let nominal = self.cost_before_plan + plan.stage_costs[..=k].iter().sum::<f64>() + look_nom;
        if !self.config.kind.uses_trigger() {
            return Some(CostCheck {
                executed,
                nominal,
                trigger: Trigger::Hold,
            });
        }
        let trigger = replan_trigger(executed, nominal, self.config.threshold);
        match trigger {
            Trigger::Fire => self.pending = Some(ReplanReason::Trigger),
            Trigger::Degenerate => self.events.push(ControllerEvent::DegenerateBaseline { step: t }),
            Trigger::Hold => {}
        }
        Some(CostCheck {
            executed,
            nominal,
            trigger,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::costs::{CostModel, CostWeights};
    use crate::dynamics::{AgentSystem, CarParams, ControlLimits};
    use crate::trajopt::SolverSettings;
    use nalgebra::{DMatrix, DVector};

    fn scenario(horizon: usize) -> Scenario {
        let state = DMatrix::from_diagonal(&DVector::from_column_slice(&[5.0, 5.0, 1.0, 0.1]));
        let weights = CostWeights {
            terminal: &state * 100.0,
            state,
            control: DMatrix::identity(2, 2),
            goal: DVector::from_column_slice(&[2.0, 1.0, 0.0, 0.0]),
        };
        Scenario::new(
            AgentSystem::single(CarParams::default(), ControlLimits::default()),
            CostModel::new(weights, None, 1),
            DVector::zeros(4),
            horizon,
            SolverSettings::default(),
        )
    }

    #[test]
    fn trigger_examples() {
        assert_eq!(replan_trigger(1.03, 1.0, 0.02), Trigger::Fire);
        assert_eq!(replan_trigger(1.01, 1.0, 0.02), Trigger::Hold);
        assert_eq!(replan_trigger(1.0, 1.0, 0.0), Trigger::Hold);
        assert_eq!(replan_trigger(0.5, 1e-10, 0.02), Trigger::Degenerate);
    }

    #[test]
    fn constrain_examples() {
        let sc = scenario(5);
        let sys = &sc.system;
        let v = |a: f64, b: f64| DVector::from_column_slice(&[a, b]);
        assert_eq!(constrain(&v(0.5, -0.3), &v(0.0, 0.0), sys), v(0.5, -0.3));
        assert_eq!(constrain(&v(5.0, 0.0), &v(2.0, 0.0), sys), v(2.0, 0.0));
        assert_eq!(constrain(&v(2.0, 0.0), &v(0.0, 0.0), sys), v(1.0, 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::new(ControllerKind::Tlqr2).with_threshold(-0.1).validate().is_err());
        assert!(ControllerConfig::new(ControllerKind::MpcSh).validate().is_err());
        assert!(ControllerConfig::new(ControllerKind::MpcSh).with_horizon(0).validate().is_err());
        assert!(ControllerConfig::new(ControllerKind::MpcSh).with_horizon(7).validate().is_ok());
    }

    #[test]
    fn noise_free_tracking_follows_the_nominal() {
        let sc = scenario(20);
        let mut c = Controller::new(&sc, ControllerConfig::new(ControllerKind::Tlqr2)).unwrap();
        let mut x = sc.x0.clone();
        for t in 0..20 {
            let out = c.step(t, &x).unwrap();
            let next = sc.system.step_nominal(&x, &out.control).unwrap();
            let check = c.observe(t, &x, &out.control, &next);
            if let Some(check) = check {
                assert_eq!(check.executed, check.nominal);
                assert_eq!(check.trigger, Trigger::Hold);
            }
            x = next;
            let plan = c.active_plan().unwrap();
            assert_eq!(x, plan.states[t + 1]);
        }
        assert_eq!(c.solves(), 1);
    }

    #[test]
    fn receding_horizon_solves_every_step() {
        let sc = scenario(8);
        let cfg = ControllerConfig::new(ControllerKind::MpcSh).with_horizon(3);
        let mut c = Controller::new(&sc, cfg).unwrap();
        let mut x = sc.x0.clone();
        for t in 0..8 {
            let out = c.step(t, &x).unwrap();
            assert_eq!(out.planned, Some(ReplanReason::Receding));
            assert_eq!(c.active_plan().unwrap().horizon(), 3.min(8 - t));
            x = sc.system.step_nominal(&x, &out.control).unwrap();
        }
        assert_eq!(c.solves(), 8);
    }

    #[test]
    fn short_plans_are_renewed_when_exhausted() {
        let sc = scenario(10);
        let cfg = ControllerConfig::new(ControllerKind::Tlqr2Sh).with_horizon(4).with_threshold(f64::INFINITY);
        let mut c = Controller::new(&sc, cfg).unwrap();
        let mut x = sc.x0.clone();
        let mut starts = Vec::new();
        for t in 0..10 {
            let out = c.step(t, &x).unwrap();
            if out.planned.is_some() {
                starts.push(t);
            }
            let next = sc.system.step_nominal(&x, &out.control).unwrap();
            c.observe(t, &x, &out.control, &next);
            x = next;
        }
        assert_eq!(starts, vec![0, 4, 8]);
    }

    #[test]
    fn stage_cost_is_booked_once_per_step() {
        let sc = scenario(5);
        let mut c = Controller::new(&sc, ControllerConfig::new(ControllerKind::Tlqr)).unwrap();
        let x = sc.x0.clone();
        let out = c.step(0, &x).unwrap();
        let next = sc.system.step_nominal(&x, &out.control).unwrap();
        let check = c.observe(0, &x, &out.control, &next).unwrap();
        let expected = sc.cost.stage(&x, &out.control) + sc.cost.state_part(&next);
        assert_eq!(check.executed, expected);
    }
}
