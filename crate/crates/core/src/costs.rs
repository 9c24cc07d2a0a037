//! Quadratic goal-deviation costs and the pairwise collision penalty.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ControlVec, StateVec, AGENT_STATE_DIM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("trajectory length mismatch: {states} states for {controls} controls")]
    Length { states: usize, controls: usize },
    #[error("weight matrix {0} is not symmetric")]
    Asymmetric(&'static str),
    #[error("weight matrix {0} is not positive semidefinite")]
    NotPsd(&'static str),
    #[error("control weight is not positive definite")]
    NotPd,
    #[error("dimension mismatch in {0}")]
    Dimension(&'static str),
    #[error("collision parameters must be positive")]
    InvalidCollision,
}

/// `c(x,u) = (x−x_g)ᵀW_x(x−x_g) + uᵀW_u u`, `c_T(x) = (x−x_g)ᵀW_f(x−x_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub state: DMatrix<f64>,
    pub control: DMatrix<f64>,
    pub terminal: DMatrix<f64>,
    pub goal: StateVec,
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), CostError> {
        let nx = self.goal.len();
        let nu = self.control.nrows();
        if self.state.shape() != (nx, nx)
            || self.terminal.shape() != (nx, nx)
            || self.control.shape() != (nu, nu)
        {
            return Err(CostError::Dimension("cost weights"));
        }
        check_psd(&self.state, "state")?;
        check_psd(&self.terminal, "terminal")?;
        if (&self.control - self.control.transpose()).amax() > 1e-12 {
            return Err(CostError::Asymmetric("control"));
        }
        match self.control.clone().symmetric_eigen().eigenvalues.min() {
            m if m > 0.0 => Ok(()),
            _ => Err(CostError::NotPd),
        }
    }

    /// Block-diagonal stacking of per-agent weights.
    pub fn stack(per_agent: &[CostWeights]) -> CostWeights {
        let goal = DVector::from_iterator(
            per_agent.iter().map(|w| w.goal.len()).sum(),
            per_agent.iter().flat_map(|w| w.goal.iter().copied()),
        );
        CostWeights {
            state: block_diag(per_agent.iter().map(|w| &w.state)),
            control: block_diag(per_agent.iter().map(|w| &w.control)),
            terminal: block_diag(per_agent.iter().map(|w| &w.terminal)),
            goal,
        }
    }

    pub fn state_quadratic(&self, x: &StateVec) -> f64 {
        let dx = x - &self.goal;
        dx.dot(&(&self.state * &dx))
    }

    pub fn control_quadratic(&self, u: &ControlVec) -> f64 {
        u.dot(&(&self.control * u))
    }
}

fn check_psd(m: &DMatrix<f64>, name: &'static str) -> Result<(), CostError> {
    if (m - m.transpose()).amax() > 1e-12 {
        return Err(CostError::Asymmetric(name));
    }
    if m.clone().symmetric_eigen().eigenvalues.min() < -1e-12 {
        return Err(CostError::NotPsd(name));
    }
    Ok(())
}

pub fn block_diag<'a>(blocks: impl Iterator<Item = &'a DMatrix<f64>> + Clone) -> DMatrix<f64> {
    let rows: usize = blocks.clone().map(|b| b.nrows()).sum();
    let cols: usize = blocks.clone().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), b.shape()).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionPenaltyParams {
    /// Penalty magnitude `M`.
    pub scale: f64,
    /// Desired minimum separation [m].
    pub r_thresh: f64,
}

impl Default for CollisionPenaltyParams {
    fn default() -> Self {
        Self {
            scale: 100.0,
            r_thresh: 0.5,
        }
    }
}

impl CollisionPenaltyParams {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.scale > 0.0 && self.r_thresh > 0.0 {
            Ok(())
        } else {
            Err(CostError::InvalidCollision)
        }
    }

    fn pair(&self, d: &Vector2<f64>) -> f64 {
        self.scale * (-(d.norm_squared() - self.r_thresh * self.r_thresh)).exp()
    }
}

fn position(x: &StateVec, agent: usize) -> Vector2<f64> {
    Vector2::new(x[AGENT_STATE_DIM * agent], x[AGENT_STATE_DIM * agent + 1])
}

pub fn stage_cost(x: &StateVec, u: &ControlVec, weights: &CostWeights) -> f64 {
    weights.state_quadratic(x) + weights.control_quadratic(u)
}

pub fn terminal_cost(x: &StateVec, weights: &CostWeights) -> f64 {
    let dx = x - &weights.goal;
    dx.dot(&(&weights.terminal * &dx))
}

/// `Σ_{i<j} M exp(−(‖p_i − p_j‖² − r²))` over the agents of a stacked state.
pub fn collision_penalty(x: &StateVec, params: &CollisionPenaltyParams, agents: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..agents {
        for j in i + 1..agents {
            total += params.pair(&(position(x, i) - position(x, j)));
        }
    }
    total
}

/// Smallest pairwise planar distance between agents.
pub fn min_pairwise_distance(x: &StateVec, agents: usize) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..agents {
        for j in i + 1..agents {
            best = best.min((position(x, i) - position(x, j)).norm());
        }
    }
    best
}

/// Gradient and Hessian of the collision penalty with respect to the stacked
/// state. The Hessian is exact (possibly indefinite).
pub fn collision_derivatives(
    x: &StateVec,
    params: &CollisionPenaltyParams,
    agents: usize,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for i in 0..agents {
        for j in i + 1..agents {
            let d = position(x, i) - position(x, j);
            let psi = params.pair(&d);
            let g = d * (-2.0 * psi);
            let h: Matrix2<f64> = (d * d.transpose() * 4.0 - Matrix2::identity() * 2.0) * psi;
            let (pi, pj) = (AGENT_STATE_DIM * i, AGENT_STATE_DIM * j);
            for k in 0..2 {
                grad[pi + k] += g[k];
                grad[pj + k] -= g[k];
                for l in 0..2 {
                    hess[(pi + k, pi + l)] += h[(k, l)];
                    hess[(pj + k, pj + l)] += h[(k, l)];
                    hess[(pi + k, pj + l)] -= h[(k, l)];
                    hess[(pj + k, pi + l)] -= h[(k, l)];
                }
            }
        }
    }
    (grad, hess)
}

/// Cost model shared by the planner and the executor: quadratic costs plus an
/// optional collision penalty on stage states.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub weights: CostWeights,
    pub collision: Option<CollisionPenaltyParams>,
    pub agents: usize,
}

impl CostModel {
    pub fn new(weights: CostWeights, collision: Option<CollisionPenaltyParams>, agents: usize) -> Self {
        Self {
            weights,
            collision,
            agents,
        }
    }

    /// State-dependent part of the stage cost (quadratic + collision).
    pub fn state_part(&self, x: &StateVec) -> f64 {
        let mut c = self.weights.state_quadratic(x);
        if let Some(p) = &self.collision {
            c += collision_penalty(x, p, self.agents);
        }
        c
    }

    pub fn stage(&self, x: &StateVec, u: &ControlVec) -> f64 {
        self.state_part(x) + self.weights.control_quadratic(u)
    }

    pub fn terminal(&self, x: &StateVec) -> f64 {
        terminal_cost(x, &self.weights)
    }

    /// Stage gradients and exact Hessians: `(g_x, g_u, H_xx, H_uu)`.
    pub fn stage_derivatives(
        &self,
        x: &StateVec,
        u: &ControlVec,
    ) -> (DVector<f64>, DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let w = &self.weights;
        let mut gx = &w.state * (x - &w.goal) * 2.0;
        let gu = &w.control * u * 2.0;
        let mut hxx = &w.state * 2.0;
        let huu = &w.control * 2.0;
        if let Some(p) = &self.collision {
            let (cg, ch) = collision_derivatives(x, p, self.agents);
            gx += cg;
            hxx += ch;
        }
        (gx, gu, hxx, huu)
    }

    pub fn terminal_derivatives(&self, x: &StateVec) -> (DVector<f64>, DMatrix<f64>) {
        let w = &self.weights;
        (&w.terminal * (x - &w.goal) * 2.0, &w.terminal * 2.0)
    }

    /// Stage costs `c_0..c_{T-1}` followed by the terminal cost.
    pub fn cost_terms(&self, states: &[StateVec], controls: &[ControlVec]) -> Result<Vec<f64>, CostError> {
        if states.len() != controls.len() + 1 {
            return Err(CostError::Length {
                states: states.len(),
                controls: controls.len(),
            });
        }
        let mut terms: Vec<f64> = states
            .iter()
            .zip(controls)
            .map(|(x, u)| self.stage(x, u))
            .collect();
        terms.push(self.terminal(states.last().expect("nonempty")));
        Ok(terms)
    }

    pub fn trajectory_cost(&self, states: &[StateVec], controls: &[ControlVec]) -> Result<f64, CostError> {
        Ok(self.cost_terms(states, controls)?.iter().sum())
    }
}

/// `Σ_t [c(x_t,u_t) + Ψ(x_t)] + c_T(x_T)`.
pub fn trajectory_cost(
    states: &[StateVec],
    controls: &[ControlVec],
    weights: &CostWeights,
    collision: Option<(&CollisionPenaltyParams, usize)>,
) -> Result<f64, CostError> {
    let model = CostModel::new(weights.clone(), collision.map(|c| *c.0), collision.map_or(1, |c| c.1));
    model.trajectory_cost(states, controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn identity_weights(goal: StateVec) -> CostWeights {
        CostWeights {
            state: DMatrix::identity(4, 4),
            control: DMatrix::identity(2, 2),
            terminal: DMatrix::identity(4, 4),
            goal,
        }
    }

    fn random_weights(rng: &mut ChaCha8Rng, nx: usize, nu: usize) -> CostWeights {
        let a = DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(nu, nu, |_, _| rng.gen_range(-1.0..1.0));
        let c = DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-1.0..1.0));
        CostWeights {
            state: &a * a.transpose(),
            control: &b * b.transpose() + DMatrix::identity(nu, nu),
            terminal: &c * c.transpose(),
            goal: DVector::from_fn(nx, |_, _| rng.gen_range(-2.0..2.0)),
        }
    }

    // Element-wise double sum, independent of nalgebra products.
    fn quad_oracle(m: &DMatrix<f64>, d: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..d.len() {
            for j in 0..d.len() {
                s += d[i] * m[(i, j)] * d[j];
            }
        }
        s
    }

    #[test]
    fn zero_at_goal() {
        let w = identity_weights(v(&[1., 2., 0.3, 0.]));
        assert_eq!(stage_cost(&w.goal.clone(), &v(&[0., 0.]), &w), 0.0);
        assert_eq!(terminal_cost(&w.goal.clone(), &w), 0.0);
    }

    #[test]
    fn hand_sum() {
        let w = identity_weights(v(&[0.; 4]));
        assert_eq!(stage_cost(&v(&[1., 0., 0., 0.]), &v(&[1., 1.]), &w), 3.0);
    }

    #[test]
    fn terminal_is_linear_in_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = random_weights(&mut rng, 4, 2);
        w.terminal = &w.state * 2.0;
        let x = v(&[0.3, -1.0, 0.4, 0.2]);
        assert_abs_diff_eq!(terminal_cost(&x, &w), 2.0 * w.state_quadratic(&x), epsilon = 1e-12);
    }

    #[test]
    fn random_costs_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let w = random_weights(&mut rng, 4, 2);
            let x = DVector::from_fn(4, |_, _| rng.gen_range(-3.0..3.0));
            let u = DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0));
            let dx: Vec<f64> = (&x - &w.goal).iter().copied().collect();
            let expected = quad_oracle(&w.state, &dx) + quad_oracle(&w.control, u.as_slice());
            assert_abs_diff_eq!(stage_cost(&x, &u, &w), expected, epsilon = 1e-10);
            assert_abs_diff_eq!(
                terminal_cost(&x, &w),
                quad_oracle(&w.terminal, &dx),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn collision_values() {
        let p = CollisionPenaltyParams {
            scale: 7.0,
            r_thresh: 0.5,
        };
        let two = v(&[0., 0., 0., 0., 0.5, 0., 0., 0.]);
        assert_abs_diff_eq!(collision_penalty(&two, &p, 2), 7.0, epsilon = 1e-14);
        let d = (1.0f64 + 0.25).sqrt();
        let two = v(&[0., 0., 0., 0., 0., d, 0., 0.]);
        assert_abs_diff_eq!(collision_penalty(&two, &p, 2), 7.0 / std::f64::consts::E, epsilon = 1e-13);
        // equilateral triangle with side d
        let s = 1.3f64;
        let tri = v(&[0., 0., 0., 0., s, 0., 0., 0., s / 2.0, s * 3f64.sqrt() / 2.0, 0., 0.]);
        let expected = 3.0 * 7.0 * (-(s * s - 0.25f64)).exp();
        assert_abs_diff_eq!(collision_penalty(&tri, &p, 3), expected, epsilon = 1e-12);
    }

    #[test]
    fn collision_is_monotone_and_symmetric() {
        let p = CollisionPenaltyParams::default();
        let at = |d: f64| collision_penalty(&v(&[0., 0., 0., 0., d, 0., 0., 0.]), &p, 2);
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let val = at(k as f64 * 0.05);
            assert!(val < prev && val > 0.0);
            prev = val;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DVector::from_fn(12, |_, _| rng.gen_range(-2.0..2.0));
        let mut permuted = x.clone();
        permuted.rows_mut(0, 4).copy_from(&x.rows(8, 4));
        permuted.rows_mut(8, 4).copy_from(&x.rows(0, 4));
        assert_abs_diff_eq!(
            collision_penalty(&x, &p, 3),
            collision_penalty(&permuted, &p, 3),
            epsilon = 1e-12
        );
    }

    #[test]
    fn collision_derivatives_match_fd() {
        let p = CollisionPenaltyParams::default();
        let x = v(&[0.1, 0.2, 0., 0., 0.6, -0.1, 0., 0., 0.3, 0.7, 0., 0.]);
        let (g, h) = collision_derivatives(&x, &p, 3);
        let eps = 1e-6;
        for i in 0..12 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += eps;
            xm[i] -= eps;
            let fd = (collision_penalty(&xp, &p, 3) - collision_penalty(&xm, &p, 3)) / (2.0 * eps);
            assert_abs_diff_eq!(g[i], fd, epsilon = 1e-5);
            let gcol = (collision_derivatives(&xp, &p, 3).0 - collision_derivatives(&xm, &p, 3).0) / (2.0 * eps);
            for r in 0..12 {
                assert_abs_diff_eq!(h[(r, i)], gcol[r], epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn trajectory_cost_cases() {
        let w = identity_weights(v(&[1., 1., 0., 0.]));
        let goal = w.goal.clone();
        let states = vec![goal.clone(); 4];
        let controls = vec![v(&[0., 0.]); 3];
        assert_eq!(trajectory_cost(&states, &controls, &w, None).unwrap(), 0.0);

        let x0 = v(&[0., 0., 0., 0.]);
        let x1 = v(&[0.5, 0., 0., 0.]);
        let u0 = v(&[1., 0.5]);
        let single = trajectory_cost(&[x0.clone(), x1.clone()], &[u0.clone()], &w, None).unwrap();
        assert_eq!(single, stage_cost(&x0, &u0, &w) + terminal_cost(&x1, &w));

        assert!(matches!(
            trajectory_cost(&states, &controls[..1], &w, None),
            Err(CostError::Length { .. })
        ));
    }

    #[test]
    fn random_trajectory_matches_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_weights(&mut rng, 4, 2);
        let states: Vec<_> = (0..11).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let controls: Vec<_> = (0..10).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let mut oracle = 0.0;
        for t in 0..10 {
            let dx: Vec<f64> = (&states[t] - &w.goal).iter().copied().collect();
            oracle += quad_oracle(&w.state, &dx) + quad_oracle(&w.control, controls[t].as_slice());
        }
        let dx: Vec<f64> = (&states[10] - &w.goal).iter().copied().collect();
        oracle += quad_oracle(&w.terminal, &dx);
        let got = trajectory_cost(&states, &controls, &w, None).unwrap();
        assert_abs_diff_eq!(got, oracle, epsilon = 1e-9);
    }

    #[test]
    fn additive_over_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_weights(&mut rng, 4, 2);
        let model = CostModel::new(w, None, 1);
        let states: Vec<_> = (0..9).map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let controls: Vec<_> = (0..8).map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-2.0..2.0))).collect();
        let total = model.trajectory_cost(&states, &controls).unwrap();
        let head: f64 = (0..3).map(|t| model.stage(&states[t], &controls[t])).sum();
        let tail = model.trajectory_cost(&states[3..], &controls[3..]).unwrap();
        assert_abs_diff_eq!(total, head + tail, epsilon = 1e-10);
    }

    #[test]
    fn validation() {
        let mut w = identity_weights(v(&[0.; 4]));
        assert!(w.validate().is_ok());
        w.control[(0, 0)] = 0.0;
        assert_eq!(w.validate(), Err(CostError::NotPd));
        let mut w = identity_weights(v(&[0.; 4]));
        w.state[(1, 1)] = -1.0;
        assert_eq!(w.validate(), Err(CostError::NotPsd("state")));
        assert!(CollisionPenaltyParams { scale: 0.0, r_thresh: 1.0 }.validate().is_err());
    }
}
