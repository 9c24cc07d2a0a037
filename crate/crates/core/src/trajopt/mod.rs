//! Deterministic optimal control: the nominal open-loop plan under box,
//! rate and steering-angle constraints.
//!
//! The problem is transcribed by single shooting over the controls and
//! solved with a sequential quadratic programming loop using the exact
//! Hessian of the Lagrangian. The state is augmented with the previously
//! applied control, so every constraint is linear in `(zₜ, uₜ)` and each
//! subproblem is an inequality-constrained LQ problem (see [`lqp`]). Since
//! the steering angle evolves linearly in the controls, every iterate is
//! feasible and the line search works on the plain cost.

mod lqp;

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costs::CostModel;
use crate::dynamics::{AgentSystem, ControlLimits, ControlVec, DynamicsError, StateVec, AGENT_CONTROL_DIM, AGENT_STATE_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("index {index} is outside the plan horizon {horizon}")]
    OutOfRange { index: usize, horizon: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// Bound on the Lagrangian stationarity residual, relative to `1 + |J|`.
    pub tolerance: f64,
    /// Bound on the infinity norm of the final Newton step.
    pub step_tolerance: f64,
    pub regularization_init: f64,
    pub regularization_growth: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub min_step: f64,
    /// Upper bound on the steering angle kept by every plan [rad].
    pub phi_max: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            tolerance: 1e-6,
            step_tolerance: 1e-8,
            regularization_init: 1e-6,
            regularization_growth: 10.0,
            armijo: 1e-4,
            backtrack: 0.5,
            min_step: 1e-10,
            phi_max: 0.6,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), SolveError> {
        let ok = self.max_iterations >= 1
            && self.tolerance > 0.0
            && self.step_tolerance > 0.0
            && self.regularization_init > 0.0
            && self.regularization_growth > 1.0
            && self.armijo > 0.0
            && self.armijo < 0.5
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.min_step > 0.0
            && self.phi_max > 0.0
            && self.phi_max < std::f64::consts::FRAC_PI_2 - crate::dynamics::STEERING_GUARD;
        if ok {
            Ok(())
        } else {
            Err(SolveError::InvalidProblem("solver settings out of range".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpProblem<'a> {
    pub x0: StateVec,
    pub horizon: usize,
    /// Previously applied control; anchors the first rate constraint.
    pub u_init: ControlVec,
    pub system: &'a AgentSystem,
    pub cost: &'a CostModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// The line search could not make progress before the tolerances were met.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NominalPlan {
    pub controls: Vec<ControlVec>,
    pub states: Vec<StateVec>,
    /// Stage costs `c̄₀..c̄_{H−1}`.
    pub stage_costs: Vec<f64>,
    pub terminal_cost: f64,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// The supplied warm start violated the constraints and was projected.
    pub projected_guess: bool,
}

impl NominalPlan {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Nominal cost accumulated through step `t`: stage costs `0..=min(t, H−1)`
    /// plus the terminal cost once `t = H`.
    pub fn cost_prefix(&self, t: usize) -> Result<f64, SolveError> {
        let h = self.horizon();
        if t > h {
            return Err(SolveError::OutOfRange { index: t, horizon: h });
        }
        let mut sum = 0.0;
        for c in &self.stage_costs[..=t.min(h - 1)] {
            sum += c;
        }
        if t == h {
            sum += self.terminal_cost;
        }
        Ok(sum)
    }
}

pub fn nominal_cost_prefix(plan: &NominalPlan, t: usize) -> Result<f64, SolveError> {
    plan.cost_prefix(t)
}

/// Noise-free forward simulation.
pub fn rollout_nominal(
    x0: &StateVec,
    controls: &[ControlVec],
    system: &AgentSystem,
) -> Result<Vec<StateVec>, DynamicsError> {
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for u in controls {
        let next = system.step_nominal(states.last().expect("nonempty"), u)?;
        states.push(next);
    }
    Ok(states)
}

/// Clamps `u` into the box, then its step from `u_prev` into `±Δu_max`.
/// The result is a fixed point: feasible inputs are returned unchanged.
pub fn constrain(u: &ControlVec, u_prev: &ControlVec, system: &AgentSystem) -> ControlVec {
    let mut out = u.clone();
    for (j, lim) in system.limits.iter().enumerate() {
        for k in 0..AGENT_CONTROL_DIM {
            let i = AGENT_CONTROL_DIM * j + k;
            let mut val = out[i].clamp(lim.u_min[k], lim.u_max[k]);
            let step = val - u_prev[i];
            if step > lim.du_max[k] {
                val = u_prev[i] + lim.du_max[k];
            } else if step < -lim.du_max[k] {
                val = u_prev[i] - lim.du_max[k];
            }
            out[i] = val;
        }
    }
    out
}

fn set_up(problem: &OcpProblem) -> Result<(), SolveError> {
    let sys = problem.system;
    if problem.horizon == 0 {
        return Err(SolveError::InvalidProblem("horizon must be at least 1".into()));
    }
    if problem.x0.len() != sys.state_dim() || problem.u_init.len() != sys.control_dim() {
        return Err(SolveError::InvalidProblem("initial state or control has wrong dimension".into()));
    }
    if problem.cost.weights.goal.len() != sys.state_dim() || problem.cost.weights.control.nrows() != sys.control_dim() {
        return Err(SolveError::InvalidProblem("cost weights do not match the system".into()));
    }
    if problem.x0.iter().any(|v| !v.is_finite()) {
        return Err(DynamicsError::NonFinite("initial state").into());
    }
    let (lo, hi) = (sys.u_min(), sys.u_max());
    for i in 0..sys.control_dim() {
        if !(problem.u_init[i] >= lo[i] - 1e-12 && problem.u_init[i] <= hi[i] + 1e-12) {
            return Err(SolveError::InvalidProblem("initial control outside the box limits".into()));
        }
    }
    // probe the steering guard at x0
    sys.step_nominal(&problem.x0, &DVector::zeros(sys.control_dim()))?;
    Ok(())
}

/// Steering-angle bound per agent for `φ₁..φ_H`. Where `|φ|` cannot be brought
/// inside `φ_max` in time (start outside, or a rate-limited steering rate
/// pushing outward), the bound is relaxed to the most corrective reachable
/// steering trajectory.
fn steering_bounds(problem: &OcpProblem, phi_max: f64) -> Vec<Vec<f64>> {
    let sys = problem.system;
    let dt = sys.dt();
    (0..sys.agents())
        .map(|j| {
            let lim = &sys.limits[j];
            let mut phi = problem.x0[AGENT_STATE_DIM * j + 3];
            let mut omega = problem.u_init[AGENT_CONTROL_DIM * j + 1];
            let mut out = Vec::with_capacity(problem.horizon);
            for _ in 0..problem.horizon {
                let lo = lim.u_min[1].max(omega - lim.du_max[1]);
                let hi = lim.u_max[1].min(omega + lim.du_max[1]);
                omega = (-phi / dt).clamp(lo, hi);
                phi += omega * dt;
                out.push(phi_max.max(phi.abs() + 1e-9));
            }
            out
        })
        .collect()
}

/// Projects a control sequence onto the feasible set: box and rate limits
/// sequentially, and the steering bound through the steering rate. Falls back
/// to the corrective steering sequence for an agent when the clamp interval
/// is empty.
fn project(problem: &OcpProblem, controls: &[ControlVec], bounds: &[Vec<f64>]) -> Vec<ControlVec> {
    let sys = problem.system;
    let dt = sys.dt();
    let mut out: Vec<ControlVec> = Vec::with_capacity(controls.len());
    for j in 0..sys.agents() {
        let lim = &sys.limits[j];
        let c = AGENT_CONTROL_DIM * j;
        let mut phi = problem.x0[AGENT_STATE_DIM * j + 3];
        let mut prev = [problem.u_init[c], problem.u_init[c + 1]];
        let mut agent_seq = Vec::with_capacity(controls.len());
        let mut ok = true;
        for (t, u) in controls.iter().enumerate() {
            let Some(pair) = clamp_pair(lim, [u[c], u[c + 1]], prev, phi, bounds[j][t], dt) else {
                ok = false;
                break;
            };
            phi += pair[1] * dt;
            prev = pair;
            agent_seq.push(pair);
        }
        if !ok {
            // corrective steering, velocity as clamped
            agent_seq.clear();
            let mut phi = problem.x0[AGENT_STATE_DIM * j + 3];
            let mut prev = [problem.u_init[c], problem.u_init[c + 1]];
            for u in controls {
                let mut v = u[c].clamp(lim.u_min[0], lim.u_max[0]);
                v = v.clamp(prev[0] - lim.du_max[0], prev[0] + lim.du_max[0]);
                let lo = lim.u_min[1].max(prev[1] - lim.du_max[1]);
                let hi = lim.u_max[1].min(prev[1] + lim.du_max[1]);
                let w = (-phi / dt).clamp(lo, hi);
                phi += w * dt;
                prev = [v, w];
                agent_seq.push(prev);
            }
        }
        for (t, pair) in agent_seq.into_iter().enumerate() {
            if j == 0 {
                out.push(DVector::zeros(sys.control_dim()));
            }
            out[t][c] = pair[0];
            out[t][c + 1] = pair[1];
        }
    }
    out
}

/// Clamps one agent's control pair into the box, the rate limits around
/// `prev` and the steering interval implied by `φ` and `bound`. Returns
/// `None` when the steering interval cannot be met.
fn clamp_pair(lim: &ControlLimits, u: [f64; 2], prev: [f64; 2], phi: f64, bound: f64, dt: f64) -> Option<[f64; 2]> {
    let mut pair = [0.0; 2];
    for k in 0..2 {
        let mut val = u[k].clamp(lim.u_min[k], lim.u_max[k]);
        let step = val - prev[k];
        if step > lim.du_max[k] {
            val = prev[k] + lim.du_max[k];
        } else if step < -lim.du_max[k] {
            val = prev[k] - lim.du_max[k];
        }
        pair[k] = val;
    }
    let lo = (-bound - phi) / dt;
    let hi = (bound - phi) / dt;
    if pair[1] < lo || pair[1] > hi {
        let rlo = lim.u_min[1].max(prev[1] - lim.du_max[1]).max(lo);
        let rhi = lim.u_max[1].min(prev[1] + lim.du_max[1]).min(hi);
        if rlo > rhi {
            return None;
        }
        pair[1] = pair[1].clamp(rlo, rhi);
    }
    Some(pair)
}

/// Trial iterate for step length `alpha`, rolled out with the subproblem's
/// feedback gains so that the controls react to the nonlinear state drift.
/// Each control is clamped to the feasible set as it is applied.
fn feedback_trial(
    problem: &OcpProblem,
    current: &Iterate,
    step: &lqp::Solution,
    bounds: &[Vec<f64>],
    alpha: f64,
) -> Option<Iterate> {
    if step.gains.len() != current.controls.len() {
        return None;
    }
    let sys = problem.system;
    let (nx, nu) = (sys.state_dim(), sys.control_dim());
    let dt = sys.dt();
    let mut x = problem.x0.clone();
    let mut prev = problem.u_init.clone();
    let mut states = Vec::with_capacity(current.states.len());
    let mut controls = Vec::with_capacity(current.controls.len());
    states.push(x.clone());
    for t in 0..current.controls.len() {
        let prev_bar = if t == 0 { &problem.u_init } else { &current.controls[t - 1] };
        let mut dev = DVector::zeros(nx + nu);
        dev.rows_mut(0, nx).copy_from(&(&x - &current.states[t] - step.z[t].rows(0, nx) * alpha));
        dev.rows_mut(nx, nu).copy_from(&(&prev - prev_bar - step.z[t].rows(nx, nu) * alpha));
        let raw = &current.controls[t] + &step.u[t] * alpha + &step.gains[t] * dev;
        let mut u = DVector::zeros(nu);
        for (j, lim) in sys.limits.iter().enumerate() {
            let c = AGENT_CONTROL_DIM * j;
            let pair = clamp_pair(
                lim,
                [raw[c], raw[c + 1]],
                [prev[c], prev[c + 1]],
                x[AGENT_STATE_DIM * j + 3],
                bounds[j][t],
                dt,
            )?;
            u[c] = pair[0];
            u[c + 1] = pair[1];
        }
        x = sys.step_nominal(&x, &u).ok()?;
        states.push(x.clone());
        prev = u.clone();
        controls.push(u);
    }
    let cost = problem.cost.trajectory_cost(&states, &controls).ok()?;
    Some(Iterate { controls, states, cost })
}

fn violation(problem: &OcpProblem, controls: &[ControlVec], bounds: &[Vec<f64>]) -> f64 {
    let sys = problem.system;
    let dt = sys.dt();
    let (lo, hi, du) = (sys.u_min(), sys.u_max(), sys.du_max());
    let mut worst: f64 = 0.0;
    let mut prev = problem.u_init.clone();
    let mut phi: Vec<f64> = (0..sys.agents()).map(|j| problem.x0[AGENT_STATE_DIM * j + 3]).collect();
    for (t, u) in controls.iter().enumerate() {
        for i in 0..u.len() {
            worst = worst.max(u[i] - hi[i]).max(lo[i] - u[i]);
            worst = worst.max((u[i] - prev[i]).abs() - du[i]);
        }
        for (j, p) in phi.iter_mut().enumerate() {
            *p += u[AGENT_CONTROL_DIM * j + 1] * dt;
            worst = worst.max(p.abs() - bounds[j][t]);
        }
        prev = u.clone();
    }
    worst
}

/// Line-search steps below this send the iteration down the curvature ladder.
const SHORT_STEP: f64 = 1e-2;

#[derive(Debug, Clone, Copy)]
enum Curvature {
    /// Hessian of the Lagrangian, including the dynamics' second derivatives.
    Exact,
    /// Exact Hessian plus a multiple of the identity on the control block.
    Shifted(f64),
    /// Exact stage Hessians, each projected onto the PSD cone.
    Convexified,
    /// Cost curvature only, projected onto the PSD cone, plus a control-block
    /// regularization.
    GaussNewton(f64),
}

fn psd_part(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.symmetric_eigen();
    if eig.eigenvalues.min() >= 0.0 {
        return eig.recompose();
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

struct Iterate {
    controls: Vec<ControlVec>,
    states: Vec<StateVec>,
    cost: f64,
}

fn evaluate(problem: &OcpProblem, controls: Vec<ControlVec>) -> Result<Iterate, DynamicsError> {
    let states = rollout_nominal(&problem.x0, &controls, problem.system)?;
    let cost = problem.cost.trajectory_cost(&states, &controls).expect("lengths agree");
    Ok(Iterate { controls, states, cost })
}

/// Builds the LQ subproblem at an iterate. Also returns the control
/// gradients of the cost.
fn build_subproblem(
    problem: &OcpProblem,
    it: &Iterate,
    bounds: &[Vec<f64>],
    curvature: Curvature,
) -> Result<(lqp::Problem, Vec<DVector<f64>>), DynamicsError> {
    let sys = problem.system;
    let (nx, nu) = (sys.state_dim(), sys.control_dim());
    let nz = nx + nu;
    let m_agents = sys.agents();
    let h = it.controls.len();
    let dt = sys.dt();
    let (umin, umax, dumax) = (sys.u_min(), sys.u_max(), sys.du_max());

    let (gx_term, hxx_term) = problem.cost.terminal_derivatives(&it.states[h]);
    let mut hzz_terminal = DMatrix::zeros(nz, nz);
    hzz_terminal.view_mut((0, 0), (nx, nx)).copy_from(&hxx_term);
    let mut gz_terminal = DVector::zeros(nz);
    gz_terminal.rows_mut(0, nx).copy_from(&gx_term);

    let mut stages = Vec::with_capacity(h);
    let mut costate = gx_term;
    let mut grads = vec![DVector::zeros(nu); h];
    let rows = 4 * nu + 2 * m_agents;
    for t in (0..h).rev() {
        let x = &it.states[t];
        let u = &it.controls[t];
        let prev = if t == 0 { &problem.u_init } else { &it.controls[t - 1] };
        let (ax, bx) = sys.jacobians(x, u)?;
        let (gx, gu, hxx, huu) = problem.cost.stage_derivatives(x, u);
        let (hxx, cux, huu, regularization) = match curvature {
            Curvature::Exact => {
                let (cxx, cux, _) = sys.costate_hessian(x, u, &costate);
                (hxx + cxx, cux, huu, 0.0)
            }
            Curvature::Shifted(reg) => {
                let (cxx, cux, _) = sys.costate_hessian(x, u, &costate);
                (hxx + cxx, cux, huu, reg)
            }
            Curvature::Convexified => {
                let (cxx, cux, _) = sys.costate_hessian(x, u, &costate);
                let mut full = DMatrix::zeros(nx + nu, nx + nu);
                full.view_mut((0, 0), (nx, nx)).copy_from(&(hxx + cxx));
                full.view_mut((nx, 0), (nu, nx)).copy_from(&cux);
                full.view_mut((0, nx), (nx, nu)).copy_from(&cux.transpose());
                full.view_mut((nx, nx), (nu, nu)).copy_from(&huu);
                let full = psd_part(full);
                (
                    full.view((0, 0), (nx, nx)).into_owned(),
                    full.view((nx, 0), (nu, nx)).into_owned(),
                    full.view((nx, nx), (nu, nu)).into_owned(),
                    0.0,
                )
            }
            Curvature::GaussNewton(reg) => (psd_part(hxx), DMatrix::zeros(nu, nx), huu, reg),
        };

        let mut a = DMatrix::zeros(nz, nz);
        a.view_mut((0, 0), (nx, nx)).copy_from(&ax);
        let mut b = DMatrix::zeros(nz, nu);
        b.view_mut((0, 0), (nx, nu)).copy_from(&bx);
        b.view_mut((nx, 0), (nu, nu)).fill_with_identity();

        let mut hzz = DMatrix::zeros(nz, nz);
        hzz.view_mut((0, 0), (nx, nx)).copy_from(&hxx);
        let mut huz = DMatrix::zeros(nu, nz);
        huz.view_mut((0, 0), (nu, nx)).copy_from(&cux);
        let huu = huu + DMatrix::identity(nu, nu) * regularization;
        let mut gz = DVector::zeros(nz);
        gz.rows_mut(0, nx).copy_from(&gx);

        grads[t] = &gu + bx.transpose() * &costate;
        let next_costate = &gx + ax.transpose() * &costate;

        // C δz + D δu ≤ e − C z − D u
        let mut c = DMatrix::zeros(rows, nz);
        let mut d = DMatrix::zeros(rows, nu);
        let mut rhs = DVector::zeros(rows);
        let mut r = 0;
        for i in 0..nu {
            d[(r, i)] = 1.0;
            rhs[r] = umax[i] - u[i];
            r += 1;
            d[(r, i)] = -1.0;
            rhs[r] = u[i] - umin[i];
            r += 1;
            d[(r, i)] = 1.0;
            c[(r, nx + i)] = -1.0;
            rhs[r] = dumax[i] - (u[i] - prev[i]);
            r += 1;
            d[(r, i)] = -1.0;
            c[(r, nx + i)] = 1.0;
            rhs[r] = dumax[i] + (u[i] - prev[i]);
            r += 1;
        }
        for j in 0..m_agents {
            let (si, ci) = (AGENT_STATE_DIM * j + 3, AGENT_CONTROL_DIM * j + 1);
            let next_phi = x[si] + dt * u[ci];
            let bound = bounds[j][t];
            c[(r, si)] = 1.0;
            d[(r, ci)] = dt;
            rhs[r] = bound - next_phi;
            r += 1;
            c[(r, si)] = -1.0;
            d[(r, ci)] = -dt;
            rhs[r] = bound + next_phi;
            r += 1;
        }
        // feasible iterates can carry rounding-level negative margins
        rhs.apply(|v| *v = v.max(0.0));

        stages.push(lqp::Stage {
            a,
            b,
            hzz,
            huz,
            huu,
            gz,
            gu,
            c,
            d,
            rhs,
        });
        costate = next_costate;
    }
    stages.reverse();
    Ok((
        lqp::Problem {
            stages,
            hzz_terminal,
            gz_terminal,
        },
        grads,
    ))
}

/// Stationarity of the Lagrangian at the current iterate given subproblem
/// multipliers, plus complementarity, as one infinity norm.
fn kkt_residual(sub: &lqp::Problem, y: &[DVector<f64>]) -> f64 {
    let n = sub.stages.len();
    let nz = sub.hzz_terminal.nrows();
    let zeros_z: Vec<DVector<f64>> = vec![DVector::zeros(nz); n + 1];
    let zeros_u: Vec<DVector<f64>> = sub.stages.iter().map(|s| DVector::zeros(s.b.ncols())).collect();
    let grad = lqp::reduced_gradient(sub, &zeros_z, &zeros_u, y);
    let mut res = grad.iter().map(|g| g.amax()).fold(0.0, f64::max);
    for (s, yt) in sub.stages.iter().zip(y) {
        for (b, yi) in s.rhs.iter().zip(yt.iter()) {
            res = res.max((b * yi).abs());
        }
    }
    res
}

/// Solves the deterministic OCP from `problem.x0` over `problem.horizon`
/// steps. Returns the best feasible iterate with a non-converged status when
/// the iteration budget runs out.
pub fn solve_ocp(
    problem: &OcpProblem,
    guess: Option<&[ControlVec]>,
    settings: &SolverSettings,
) -> Result<NominalPlan, SolveError> {
    set_up(problem)?;
    settings.validate()?;
    let sys = problem.system;
    let nu = sys.control_dim();
    let h = problem.horizon;
    let bounds = steering_bounds(problem, settings.phi_max);

    let initial: Vec<ControlVec> = match guess {
        Some(g) => {
            if g.len() != h || g.iter().any(|u| u.len() != nu) {
                return Err(SolveError::InvalidProblem(format!(
                    "guess must hold {h} controls of dimension {nu}"
                )));
            }
            g.to_vec()
        }
        None => vec![DVector::zeros(nu); h],
    };
    let mut projected_guess = false;
    let initial = if violation(problem, &initial, &bounds) > 0.0 {
        projected_guess = guess.is_some();
        if projected_guess {
            debug!("warm start violates the constraints; projecting");
        }
        project(problem, &initial, &bounds)
    } else {
        initial
    };

    let mut current = evaluate(problem, initial)?;
    let mut status = SolveStatus::MaxIterations;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let ipm = lqp::IpmSettings::default();
    let mut duals: Option<Vec<DVector<f64>>> = None;

    while iterations < settings.max_iterations {
        iterations += 1;
        // curvature ladder: exact Hessian (the barrier terms convexify it on
        // active constraints), exact with a control shift, stagewise
        // convexified, regularized Gauss-Newton
        let mut ladder = vec![Curvature::Exact];
        ladder.extend([1e-2, 1e-1, 1.0, 10.0].map(Curvature::Shifted));
        ladder.push(Curvature::Convexified);
        let mut reg = settings.regularization_init;
        while reg <= 1e12 {
            ladder.push(Curvature::GaussNewton(reg));
            reg *= settings.regularization_growth;
        }
        let tolerance = settings.tolerance * (1.0 + current.cost.abs());
        let mut next = None;
        let mut done = false;
        for curvature in ladder {
            let (sub, grads) = build_subproblem(problem, &current, &bounds, curvature)?;
            if matches!(curvature, Curvature::Convexified) && lqp::check_convex(&sub).is_err() {
                continue;
            }
            let warm = if matches!(curvature, Curvature::Exact) { duals.as_deref() } else { None };
            let Ok(sol) = lqp::solve(&sub, &ipm, warm) else { continue };
            if !sol.converged {
                debug!("iteration {iterations}: {curvature:?} subproblem stopped before convergence");
            }
            kkt = kkt_residual(&sub, &sol.y);
            let step_norm = sol.u.iter().map(|u| u.amax()).fold(0.0, f64::max);
            let slope: f64 = grads.iter().zip(&sol.u).map(|(g, d)| g.dot(d)).sum();
            let negligible = -slope <= 1e-12 * (1.0 + current.cost.abs());
            if kkt <= tolerance && (step_norm <= settings.step_tolerance || negligible) {
                done = true;
                break;
            }
            if slope >= 0.0 {
                continue;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= settings.min_step {
                let cand = match feedback_trial(problem, &current, &sol, &bounds, alpha) {
                    Some(c) => Ok(c),
                    None => {
                        let trial: Vec<ControlVec> =
                            current.controls.iter().zip(&sol.u).map(|(u, d)| u + d * alpha).collect();
                        evaluate(problem, project(problem, &trial, &bounds))
                    }
                };
                if let Ok(cand) = cand {
                    if cand.cost <= current.cost + settings.armijo * alpha * slope {
                        accepted = Some(cand);
                        break;
                    }
                }
                alpha *= settings.backtrack;
            }
            debug!(
                "sqp it {iterations}: {curvature:?} cost {:.9} step {step_norm:.3e} kkt {kkt:.3e} slope {slope:.3e} alpha {alpha} ipm {}",
                current.cost, sol.iterations
            );
            if let Some(cand) = accepted {
                // a heavily damped step means the model is poor; keep it only
                // if no lower rung does better
                let poor = alpha < SHORT_STEP;
                if next.as_ref().is_none_or(|(n, _): &(Iterate, _)| cand.cost < n.cost) {
                    next = Some((cand, sol.y));
                }
                if !poor {
                    break;
                }
            }
        }
        if done {
            status = SolveStatus::Converged;
            break;
        }
        match next {
            Some((n, y)) => {
                current = n;
                duals = Some(y);
            }
            None => {
                status = if kkt <= tolerance { SolveStatus::Converged } else { SolveStatus::Stalled };
                break;
            }
        }
    }

    let model = problem.cost;
    let stage_costs: Vec<f64> = current
        .states
        .iter()
        .zip(&current.controls)
        .map(|(x, u)| model.stage(x, u))
        .collect();
    let terminal_cost = model.terminal(&current.states[h]);
    let mut plan = NominalPlan {
        controls: current.controls,
        states: current.states,
        stage_costs,
        terminal_cost,
        cost: 0.0,
        status,
        iterations,
        kkt_residual: kkt,
        projected_guess,
    };
    plan.cost = plan.cost_prefix(h)?;
    debug!(
        "ocp solved: horizon {h}, cost {:.6}, iterations {iterations}, status {:?}",
        plan.cost, plan.status
    );
    Ok(plan)
}

/// Maximum constraint violation of a plan, measured independently of the
/// solver: box, rate (against `u_init`) and `|φ| ≤ φ_max` on planned states
/// after the initial one.
pub fn constraint_violation(plan: &NominalPlan, u_init: &ControlVec, system: &AgentSystem, phi_max: f64) -> f64 {
    let (lo, hi, du) = (system.u_min(), system.u_max(), system.du_max());
    let mut worst: f64 = 0.0;
    let mut prev = u_init;
    for u in &plan.controls {
        for i in 0..u.len() {
            worst = worst.max(u[i] - hi[i]).max(lo[i] - u[i]).max((u[i] - prev[i]).abs() - du[i]);
        }
        prev = u;
    }
    for x in plan.states.iter().skip(1) {
        for j in 0..system.agents() {
            worst = worst.max(x[AGENT_STATE_DIM * j + 3].abs() - phi_max);
        }
    }
    worst
}
