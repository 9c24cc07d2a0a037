//! Time-varying LQR tracking of a nominal plan.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::costs::{block_diag, CostWeights};
use crate::dynamics::{AgentSystem, ControlVec, DynamicsError, StateVec, AGENT_CONTROL_DIM, AGENT_STATE_DIM};
use crate::trajopt::NominalPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("R + BᵀPB is not positive definite at step {0}")]
    Indefinite(usize),
    #[error("LQR weights violate Q ⪰ 0, R ≻ 0, Q_f ⪰ 0: {0}")]
    Weights(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// `(A_t, B_t)` along a nominal trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl LinearizedSystem {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }

    /// Diagonal block of agent `j`.
    pub fn agent_block(&self, j: usize) -> LinearizedSystem {
        let (sx, su) = (AGENT_STATE_DIM * j, AGENT_CONTROL_DIM * j);
        LinearizedSystem {
            a: self
                .a
                .iter()
                .map(|a| a.view((sx, sx), (AGENT_STATE_DIM, AGENT_STATE_DIM)).into_owned())
                .collect(),
            b: self
                .b
                .iter()
                .map(|b| b.view((sx, su), (AGENT_STATE_DIM, AGENT_CONTROL_DIM)).into_owned())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
}

impl LqrWeights {
    /// Reuses the planner's cost weights.
    pub fn from_costs(w: &CostWeights) -> Self {
        Self {
            q: w.state.clone(),
            r: w.control.clone(),
            q_f: w.terminal.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), FeedbackError> {
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
        let min_eig = |m: &DMatrix<f64>| m.clone().symmetric_eigen().eigenvalues.min();
        if !(sym(&self.q) && sym(&self.r) && sym(&self.q_f)) {
            return Err(FeedbackError::Weights("asymmetric weight".into()));
        }
        if min_eig(&self.q) < -1e-12 || min_eig(&self.q_f) < -1e-12 {
            return Err(FeedbackError::Weights("state weight is indefinite".into()));
        }
        if min_eig(&self.r) <= 0.0 {
            return Err(FeedbackError::Weights("control weight is not positive definite".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            q: &self.q * factor,
            r: &self.r * factor,
            q_f: &self.q_f * factor,
        }
    }

    /// Diagonal block of agent `j`.
    pub fn agent_block(&self, j: usize) -> LqrWeights {
        let (sx, su) = (AGENT_STATE_DIM * j, AGENT_CONTROL_DIM * j);
        let nx = AGENT_STATE_DIM;
        let nu = AGENT_CONTROL_DIM;
        LqrWeights {
            q: self.q.view((sx, sx), (nx, nx)).into_owned(),
            r: self.r.view((su, su), (nu, nu)).into_owned(),
            q_f: self.q_f.view((sx, sx), (nx, nx)).into_owned(),
        }
    }
}

/// Gains `L₀..L_{H−1}` and cost-to-go matrices `P₀..P_H`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub gains: Vec<DMatrix<f64>>,
    pub cost_to_go: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }

    /// Joint schedule with the per-agent gains on the diagonal.
    pub fn block_diagonal(per_agent: &[GainSchedule]) -> GainSchedule {
        let h = per_agent[0].horizon();
        GainSchedule {
            gains: (0..h).map(|t| block_diag(per_agent.iter().map(|g| &g.gains[t]))).collect(),
            cost_to_go: (0..=h)
                .map(|t| block_diag(per_agent.iter().map(|g| &g.cost_to_go[t])))
                .collect(),
        }
    }
}

pub fn linearize_along(plan: &NominalPlan, system: &AgentSystem) -> Result<LinearizedSystem, DynamicsError> {
    let (a, b) = plan
        .states
        .iter()
        .zip(&plan.controls)
        .map(|(x, u)| system.jacobians(x, u))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .unzip();
    Ok(LinearizedSystem { a, b })
}

/// Backward Riccati recursion from `P_H = Q_f`:
/// `L_t = (R + BᵀP_{t+1}B)⁻¹ BᵀP_{t+1}A`, `P_t = AᵀP_{t+1}A − AᵀP_{t+1}B L_t + Q`.
pub fn riccati_backward(lin: &LinearizedSystem, weights: &LqrWeights) -> Result<GainSchedule, FeedbackError> {
    let h = lin.horizon();
    if lin.b.len() != h {
        return Err(FeedbackError::Dimension("A and B sequences differ in length".into()));
    }
    let nx = weights.q.nrows();
    if let Some(t) = (0..h).find(|&t| lin.a[t].shape() != (nx, nx) || lin.b[t].nrows() != nx) {
        return Err(FeedbackError::Dimension(format!("system matrices at step {t}")));
    }
    let mut p = weights.q_f.clone();
    let mut gains = vec![DMatrix::zeros(0, 0); h];
    let mut ps = vec![DMatrix::zeros(0, 0); h + 1];
    ps[h] = p.clone();
    for t in (0..h).rev() {
        let (a, b) = (&lin.a[t], &lin.b[t]);
        let pa = &p * a;
        let pb = &p * b;
        let s = &weights.r + b.transpose() * &pb;
        let chol = s.clone().cholesky().ok_or(FeedbackError::Indefinite(t))?;
        let rhs = b.transpose() * &pa;
        let mut l = chol.solve(&rhs);
        // one refinement step recovers the last bits lost to the factorization
        let correction = chol.solve(&(&rhs - &s * &l));
        l += correction;
        let next = a.transpose() * &pa - a.transpose() * &pb * &l + &weights.q;
        p = (&next + next.transpose()) * 0.5;
        gains[t] = l;
        ps[t] = p.clone();
    }
    Ok(GainSchedule { gains, cost_to_go: ps })
}

/// `u = ū − L(x − x̄)`, not yet constrained.
pub fn apply_feedback(u_bar: &ControlVec, gain: &DMatrix<f64>, x: &StateVec, x_bar: &StateVec) -> ControlVec {
    u_bar - gain * (x - x_bar)
}

/// Independent LQR design on every agent's diagonal block.
pub fn decoupled_gains(
    plan: &NominalPlan,
    system: &AgentSystem,
    per_agent: &[LqrWeights],
) -> Result<Vec<GainSchedule>, FeedbackError> {
    if per_agent.len() != system.agents() {
        return Err(FeedbackError::Dimension(format!(
            "{} weight sets for {} agents",
            per_agent.len(),
            system.agents()
        )));
    }
    let lin = linearize_along(plan, system)?;
    per_agent
        .iter()
        .enumerate()
        .map(|(j, w)| riccati_backward(&lin.agent_block(j), w))
        .collect()
}

/// Largest relative residual of the gain and Riccati equations.
pub fn riccati_residual(lin: &LinearizedSystem, weights: &LqrWeights, gs: &GainSchedule) -> f64 {
    let mut worst: f64 = 0.0;
    let h = lin.horizon();
    let rel = |m: DMatrix<f64>, scale: f64| m.amax() / (1.0 + scale);
    worst = worst.max(rel(&gs.cost_to_go[h] - &weights.q_f, weights.q_f.amax()));
    for t in 0..h {
        let (a, b, p) = (&lin.a[t], &lin.b[t], &gs.cost_to_go[t + 1]);
        let s = &weights.r + b.transpose() * p * b;
        let gain_res = &s * &gs.gains[t] - b.transpose() * p * a;
        worst = worst.max(rel(gain_res, s.amax() * gs.gains[t].amax()));
        let ric = a.transpose() * p * a - a.transpose() * p * b * &gs.gains[t] + &weights.q;
        worst = worst.max(rel(&gs.cost_to_go[t] - &ric, ric.amax()));
    }
    worst
}

/// Noise-free closed-loop cost of `δx_{t+1} = A δx + B δu`, `δu = −L δx` from
/// `δx₀`, under `Σ δxᵀQδx + δuᵀRδu + δx_HᵀQ_f δx_H`.
pub fn closed_loop_cost(lin: &LinearizedSystem, weights: &LqrWeights, gs: &GainSchedule, dx0: &DVector<f64>) -> f64 {
    let mut dx = dx0.clone();
    let mut cost = 0.0;
    for t in 0..lin.horizon() {
        let du = -(&gs.gains[t] * &dx);
        cost += dx.dot(&(&weights.q * &dx)) + du.dot(&(&weights.r * &du));
        dx = &lin.a[t] * &dx + &lin.b[t] * &du;
    }
    cost + dx.dot(&(&weights.q_f * &dx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(h: usize) -> (LinearizedSystem, LqrWeights) {
        let one = DMatrix::from_element(1, 1, 1.0);
        (
            LinearizedSystem {
                a: vec![one.clone(); h],
                b: vec![one.clone(); h],
            },
            LqrWeights {
                q: one.clone(),
                r: one.clone(),
                q_f: one,
            },
        )
    }

    #[test]
    fn scalar_hand_iterations() {
        let (lin, w) = scalar(1);
        let gs = riccati_backward(&lin, &w).unwrap();
        assert_eq!(gs.gains[0][(0, 0)], 0.5);
        assert_eq!(gs.cost_to_go[0][(0, 0)], 1.5);
        let (lin, w) = scalar(2);
        let gs = riccati_backward(&lin, &w).unwrap();
        assert_abs_diff_eq!(gs.gains[1][(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(gs.cost_to_go[1][(0, 0)], 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(gs.gains[0][(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(gs.cost_to_go[0][(0, 0)], 1.6, epsilon = 1e-15);
    }

    #[test]
    fn feedback_law() {
        let ub = DVector::from_element(1, 1.0);
        let l = DMatrix::from_element(1, 1, 0.5);
        let x = DVector::from_element(1, 2.0);
        let xb = DVector::from_element(1, 0.0);
        assert_eq!(apply_feedback(&ub, &l, &x, &xb)[0], 0.0);
        assert_eq!(apply_feedback(&ub, &l, &xb, &xb), ub);
        assert_eq!(apply_feedback(&ub, &DMatrix::zeros(1, 1), &x, &xb), ub);
    }

    #[test]
    fn indefinite_control_weight_is_reported() {
        let (lin, mut w) = scalar(3);
        w.r[(0, 0)] = -5.0;
        assert!(matches!(riccati_backward(&lin, &w), Err(FeedbackError::Indefinite(_))));
        assert!(w.validate().is_err());
    }

    #[test]
    fn gains_are_scale_invariant_and_residual_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lin = LinearizedSystem {
            a: (0..12).map(|_| DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0))).collect(),
            b: (0..12).map(|_| DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0))).collect(),
        };
        let q = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let w = LqrWeights {
            q: &q * q.transpose(),
            r: DMatrix::identity(2, 2) * 0.5,
            q_f: DMatrix::identity(4, 4) * 3.0,
        };
        let gs = riccati_backward(&lin, &w).unwrap();
        assert!(riccati_residual(&lin, &w, &gs) < 1e-10);
        for p in &gs.cost_to_go {
            assert!(p.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
        let scaled = riccati_backward(&lin, &w.scaled(7.5)).unwrap();
        for (a, b) in gs.gains.iter().zip(&scaled.gains) {
            assert!((a - b).amax() <= 1e-10 * (1.0 + a.amax()));
        }
    }
}
