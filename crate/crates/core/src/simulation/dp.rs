//! Exact dynamic programming on a small discrete system, compared with the
//! greedy policy as the noise swamps the dynamics.
//!
//! The system is a ring of cells. An action shifts the position by a fixed
//! number of cells; with noise scale ε the shift is blurred by a wrapped
//! Gaussian of width proportional to ε and, with probability
//! `s = ε²/(1+ε²)`, replaced by a uniformly random cell. At `ε = ∞` the next
//! cell no longer depends on the action.

use serde::{Deserialize, Serialize};

use super::SimulationError;

pub const MAX_CELLS: usize = 10_000;
pub const MAX_ACTIONS: usize = 9;
pub const MAX_HORIZON: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpProblem {
    /// Cost of being in each cell; its length is the ring size.
    pub state_cost: Vec<f64>,
    /// Cell shift of each action.
    pub actions: Vec<i64>,
    pub horizon: usize,
    /// Action cost `r a²`.
    pub action_weight: f64,
    pub terminal_weight: f64,
    /// Gaussian blur in cells per unit ε.
    pub blur: f64,
}

impl DpProblem {
    /// Goal at cell 0 behind a cost ridge; beyond the ridge the cost settles
    /// on a plateau below the ridge height. Reaching the goal pays off only
    /// several steps after crossing the ridge, so the immediate-cost minimizer
    /// (stand still) is not optimal without noise.
    pub fn delayed_reward() -> Self {
        let n = 41usize;
        let state_cost = (0..n)
            .map(|i| {
                let d = i.min(n - i) as f64;
                if d <= 3.0 {
                    d
                } else {
                    (3.0 - 0.5 * (d - 3.0)).max(1.0)
                }
            })
            .collect();
        Self {
            state_cost,
            actions: vec![-2, -1, 0, 1, 2],
            horizon: 10,
            action_weight: 0.1,
            terminal_weight: 5.0,
            blur: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let n = self.state_cost.len();
        let bad = |m: String| Err(SimulationError::InvalidSpec(m));
        if n == 0 || n > MAX_CELLS {
            return bad(format!("grid has {n} cells, limit is {MAX_CELLS}"));
        }
        if self.actions.is_empty() || self.actions.len() > MAX_ACTIONS {
            return bad(format!("{} actions, limit is {MAX_ACTIONS}", self.actions.len()));
        }
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return bad(format!("horizon {}, limit is {MAX_HORIZON}", self.horizon));
        }
        if !(self.action_weight >= 0.0 && self.terminal_weight >= 0.0 && self.blur >= 0.0) {
            return bad("weights and blur must be nonnegative".into());
        }
        Ok(())
    }

    fn cells(&self) -> usize {
        self.state_cost.len()
    }

    fn stage(&self, x: usize, a: usize) -> f64 {
        let shift = self.actions[a] as f64;
        self.state_cost[x] + self.action_weight * shift * shift
    }

    /// Distribution of the cell offset from the intended target.
    fn kernel(&self, epsilon: f64) -> Vec<f64> {
        let n = self.cells();
        let swamp = if epsilon.is_infinite() { 1.0 } else { epsilon * epsilon / (1.0 + epsilon * epsilon) };
        let sigma = self.blur * epsilon;
        let mut k = vec![0.0; n];
        if swamp < 1.0 {
            if sigma == 0.0 {
                k[0] = 1.0;
            } else {
                for (i, ki) in k.iter_mut().enumerate() {
                    let d = i.min(n - i) as f64;
                    *ki = (-0.5 * d * d / (sigma * sigma)).exp();
                }
                let total: f64 = k.iter().sum();
                k.iter_mut().for_each(|v| *v /= total);
            }
        }
        k.iter().map(|v| (1.0 - swamp) * v + swamp / n as f64).collect()
    }

    fn target(&self, x: usize, a: usize) -> usize {
        let n = self.cells() as i64;
        (x as i64 + self.actions[a]).rem_euclid(n) as usize
    }

    fn expected(&self, values: &[f64], kernel: &[f64], target: usize) -> f64 {
        let n = self.cells();
        kernel
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(off, p)| p * values[(target + off) % n])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpPoint {
    pub epsilon: f64,
    /// Fraction of (step, cell) pairs where the greedy action is optimal.
    pub agreement: f64,
    /// Relative excess cost-to-go of the greedy policy from step 0.
    pub cost_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpReport {
    pub points: Vec<DpPoint>,
}

impl DpReport {
    pub fn agreement_nondecreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].agreement >= w[0].agreement)
    }
}

/// Backward induction for the optimal and the greedy policy at each noise
/// scale. `f64::INFINITY` stands for the fully swamped limit.
pub fn high_noise_dp_check(problem: &DpProblem, epsilons: &[f64]) -> Result<DpReport, SimulationError> {
    problem.validate()?;
    if epsilons.iter().any(|e| !(*e >= 0.0)) {
        return Err(SimulationError::InvalidSpec("noise scales must be nonnegative".into()));
    }
    let n = problem.cells();
    let na = problem.actions.len();
    let greedy: Vec<usize> = (0..n)
        .map(|x| {
            (0..na)
                .min_by(|&a, &b| problem.stage(x, a).total_cmp(&problem.stage(x, b)))
                .expect("actions nonempty")
        })
        .collect();

    let points = epsilons
        .iter()
        .map(|&epsilon| {
            let kernel = problem.kernel(epsilon);
            let terminal: Vec<f64> = problem.state_cost.iter().map(|c| problem.terminal_weight * c).collect();
            let mut v_opt = terminal.clone();
            let mut v_greedy = terminal;
            let mut agree = 0usize;
            for _ in 0..problem.horizon {
                let mut next_opt = vec![0.0; n];
                let mut next_greedy = vec![0.0; n];
                for x in 0..n {
                    let q: Vec<f64> = (0..na)
                        .map(|a| problem.stage(x, a) + problem.expected(&v_opt, &kernel, problem.target(x, a)))
                        .collect();
                    let best = q.iter().copied().fold(f64::INFINITY, f64::min);
                    if q[greedy[x]] - best <= 1e-9 * (1.0 + best.abs()) {
                        agree += 1;
                    }
                    next_opt[x] = best;
                    let g = greedy[x];
                    next_greedy[x] = problem.stage(x, g) + problem.expected(&v_greedy, &kernel, problem.target(x, g));
                }
                v_opt = next_opt;
                v_greedy = next_greedy;
            }
            let opt: f64 = v_opt.iter().sum();
            let gap: f64 = v_greedy.iter().zip(&v_opt).map(|(g, o)| g - o).sum();
            DpPoint {
                epsilon,
                agreement: agree as f64 / (n * problem.horizon) as f64,
                cost_gap: if opt > 0.0 { gap / opt } else { 0.0 },
            }
        })
        .collect();
    Ok(DpReport { points })
}
