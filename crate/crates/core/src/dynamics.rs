//! Car-like robot kinematics, the stacked multi-agent system, Jacobians and
//! the actuator-noise model.
//!
//! Every agent carries the state `(x, y, θ, φ)` and the control `(v, ω)`.
//! Stacked vectors are agent-major: agent `j` owns entries `4j..4j+4` of the
//! state and `2j..2j+2` of the control.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type StateVec = DVector<f64>;
pub type ControlVec = DVector<f64>;

pub const AGENT_STATE_DIM: usize = 4;
pub const AGENT_CONTROL_DIM: usize = 2;

/// Steering angles closer than this to ±π/2 are rejected.
pub const STEERING_GUARD: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("steering angle {phi} of agent {agent} is within the tan singularity guard")]
    SteeringSingularity { agent: usize, phi: f64 },
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarParams {
    /// Wheelbase [m].
    pub wheelbase: f64,
    /// Time step [s].
    pub dt: f64,
}

impl Default for CarParams {
    fn default() -> Self {
        Self {
            wheelbase: 0.5,
            dt: 0.1,
        }
    }
}

impl CarParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.wheelbase > 0.0 && self.wheelbase.is_finite()) {
            return Err(DynamicsError::InvalidParameter(format!(
                "wheelbase must be positive, got {}",
                self.wheelbase
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Per-agent control limits: box bounds and the per-step rate bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlLimits {
    pub u_min: [f64; 2],
    pub u_max: [f64; 2],
    pub du_max: [f64; 2],
}

impl Default for ControlLimits {
    fn default() -> Self {
        Self {
            u_min: [-2.0, -2.0],
            u_max: [2.0, 2.0],
            du_max: [1.0, 1.0],
        }
    }
}

impl ControlLimits {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        for k in 0..AGENT_CONTROL_DIM {
            if !(self.u_min[k] < self.u_max[k]) {
                return Err(DynamicsError::InvalidParameter(format!(
                    "u_min[{k}] must be below u_max[{k}]"
                )));
            }
            if !(self.du_max[k] > 0.0) {
                return Err(DynamicsError::InvalidParameter(format!(
                    "du_max[{k}] must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Actuator noise `w = u_max ⊙ ν`, `ν ~ N(0, Σ_w)`; the scale ε is applied in
/// [`AgentSystem::step_noisy`].
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub epsilon: f64,
    /// Lower Cholesky factor of Σ_w over one agent's control.
    pub sigma_chol: DMatrix<f64>,
    pub u_max: [f64; 2],
}

impl NoiseModel {
    pub fn new(epsilon: f64, u_max: [f64; 2]) -> Self {
        Self {
            epsilon,
            sigma_chol: DMatrix::identity(AGENT_CONTROL_DIM, AGENT_CONTROL_DIM),
            u_max,
        }
    }

    pub fn with_covariance(mut self, sigma: &DMatrix<f64>) -> Result<Self, DynamicsError> {
        if sigma.shape() != (AGENT_CONTROL_DIM, AGENT_CONTROL_DIM) {
            return Err(DynamicsError::Dimension {
                what: "noise covariance",
                expected: AGENT_CONTROL_DIM,
                got: sigma.nrows(),
            });
        }
        if (sigma - sigma.transpose()).amax() > 1e-12 {
            return Err(DynamicsError::InvalidParameter(
                "noise covariance must be symmetric".into(),
            ));
        }
        // Semidefinite covariances: factor a tiny shift, which leaves the
        // samples unchanged to within the shift.
        let shifted = sigma + DMatrix::identity(2, 2) * 1e-14;
        let chol = shifted.cholesky().ok_or_else(|| {
            DynamicsError::InvalidParameter("noise covariance must be PSD".into())
        })?;
        self.sigma_chol = chol.l();
        Ok(self)
    }

    /// Maps one standard-normal draw `ν` (already correlated or not) to `w`.
    pub fn scale(&self, nu: [f64; 2]) -> [f64; 2] {
        let nu = DVector::from_column_slice(&nu);
        let c = &self.sigma_chol * nu;
        [self.u_max[0] * c[0], self.u_max[1] * c[1]]
    }

    /// Draws one agent's noise `w = u_max ⊙ (L ν)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let nu = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        self.scale(nu)
    }
}

/// M block-decoupled car-like agents sharing one clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSystem {
    pub params: Vec<CarParams>,
    pub limits: Vec<ControlLimits>,
}

impl AgentSystem {
    pub fn single(params: CarParams, limits: ControlLimits) -> Self {
        Self {
            params: vec![params],
            limits: vec![limits],
        }
    }

    pub fn homogeneous(agents: usize, params: CarParams, limits: ControlLimits) -> Self {
        Self {
            params: vec![params; agents],
            limits: vec![limits; agents],
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.params.is_empty() {
            return Err(DynamicsError::InvalidParameter(
                "at least one agent is required".into(),
            ));
        }
        if self.params.len() != self.limits.len() {
            return Err(DynamicsError::Dimension {
                what: "per-agent limits",
                expected: self.params.len(),
                got: self.limits.len(),
            });
        }
        let dt = self.params[0].dt;
        for p in &self.params {
            p.validate()?;
            if p.dt != dt {
                return Err(DynamicsError::InvalidParameter(
                    "all agents must share one time step".into(),
                ));
            }
        }
        self.limits.iter().try_for_each(ControlLimits::validate)
    }

    pub fn agents(&self) -> usize {
        self.params.len()
    }

    pub fn state_dim(&self) -> usize {
        AGENT_STATE_DIM * self.agents()
    }

    pub fn control_dim(&self) -> usize {
        AGENT_CONTROL_DIM * self.agents()
    }

    pub fn dt(&self) -> f64 {
        self.params[0].dt
    }

    pub fn u_min(&self) -> ControlVec {
        self.stacked_limit(|l| l.u_min)
    }

    pub fn u_max(&self) -> ControlVec {
        self.stacked_limit(|l| l.u_max)
    }

    pub fn du_max(&self) -> ControlVec {
        self.stacked_limit(|l| l.du_max)
    }

    fn stacked_limit(&self, pick: impl Fn(&ControlLimits) -> [f64; 2]) -> ControlVec {
        DVector::from_iterator(
            self.control_dim(),
            self.limits.iter().flat_map(|l| pick(l).into_iter()),
        )
    }

    fn check_dims(&self, x: &StateVec, u: &ControlVec) -> Result<(), DynamicsError> {
        if x.len() != self.state_dim() {
            return Err(DynamicsError::Dimension {
                what: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(DynamicsError::Dimension {
                what: "control",
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("state"));
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite("control"));
        }
        for j in 0..self.agents() {
            let phi = x[AGENT_STATE_DIM * j + 3];
            if phi.abs() >= std::f64::consts::FRAC_PI_2 - STEERING_GUARD {
                return Err(DynamicsError::SteeringSingularity { agent: j, phi });
            }
        }
        Ok(())
    }

    /// `x⁺ = f(x) + B(x) u` with `f(x) = x`.
    pub fn step_nominal(&self, x: &StateVec, u: &ControlVec) -> Result<StateVec, DynamicsError> {
        self.check_dims(x, u)?;
        let mut next = x.clone();
        for (j, p) in self.params.iter().enumerate() {
            let (s, c) = (AGENT_STATE_DIM * j, AGENT_CONTROL_DIM * j);
            let (theta, phi) = (x[s + 2], x[s + 3]);
            let (v, omega) = (u[c], u[c + 1]);
            next[s] += v * theta.cos() * p.dt;
            next[s + 1] += v * theta.sin() * p.dt;
            next[s + 2] += v / p.wheelbase * phi.tan() * p.dt;
            next[s + 3] += omega * p.dt;
        }
        Ok(next)
    }

    /// `x⁺ = f(x) + B(x)(u + εw)`.
    pub fn step_noisy(
        &self,
        x: &StateVec,
        u: &ControlVec,
        w: &ControlVec,
        epsilon: f64,
    ) -> Result<StateVec, DynamicsError> {
        if w.len() != u.len() {
            return Err(DynamicsError::Dimension {
                what: "noise",
                expected: u.len(),
                got: w.len(),
            });
        }
        let perturbed = u + w * epsilon;
        self.step_nominal(x, &perturbed)
    }

    /// Analytic Jacobians `(∂x⁺/∂x, ∂x⁺/∂u)`; cross-agent blocks are zero.
    pub fn jacobians(
        &self,
        x: &StateVec,
        u: &ControlVec,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        self.check_dims(x, u)?;
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let mut a = DMatrix::identity(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        for (j, p) in self.params.iter().enumerate() {
            let (s, c) = (AGENT_STATE_DIM * j, AGENT_CONTROL_DIM * j);
            let (theta, phi) = (x[s + 2], x[s + 3]);
            let v = u[c];
            let (st, ct) = theta.sin_cos();
            let sec2 = 1.0 / (phi.cos() * phi.cos());
            a[(s, s + 2)] = -v * st * p.dt;
            a[(s + 1, s + 2)] = v * ct * p.dt;
            a[(s + 2, s + 3)] = v / p.wheelbase * sec2 * p.dt;
            b[(s, c)] = ct * p.dt;
            b[(s + 1, c)] = st * p.dt;
            b[(s + 2, c)] = phi.tan() / p.wheelbase * p.dt;
            b[(s + 3, c + 1)] = p.dt;
        }
        Ok((a, b))
    }

    /// Second-order term `∇²(λᵀ x⁺)` with respect to `(x, u)`, returned as the
    /// blocks `(xx, ux, uu)`. Only the heading/steering/velocity couplings are
    /// nonzero.
    pub fn costate_hessian(
        &self,
        x: &StateVec,
        u: &ControlVec,
        costate: &StateVec,
    ) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let (nx, nu) = (self.state_dim(), self.control_dim());
        let mut hxx = DMatrix::zeros(nx, nx);
        let mut hux = DMatrix::zeros(nu, nx);
        let huu = DMatrix::zeros(nu, nu);
        for (j, p) in self.params.iter().enumerate() {
            let (s, c) = (AGENT_STATE_DIM * j, AGENT_CONTROL_DIM * j);
            let (theta, phi) = (x[s + 2], x[s + 3]);
            let v = u[c];
            let (lx, ly, lth) = (costate[s], costate[s + 1], costate[s + 2]);
            let (st, ct) = theta.sin_cos();
            let sec2 = 1.0 / (phi.cos() * phi.cos());
            let tan = phi.tan();
            hxx[(s + 2, s + 2)] = p.dt * v * (-lx * ct - ly * st);
            hxx[(s + 3, s + 3)] = p.dt * v * lth * 2.0 * tan * sec2 / p.wheelbase;
            hux[(c, s + 2)] = p.dt * (-lx * st + ly * ct);
            hux[(c, s + 3)] = p.dt * lth * sec2 / p.wheelbase;
        }
        (hxx, hux, huu)
    }

    pub fn fd_jacobians(
        &self,
        x: &StateVec,
        u: &ControlVec,
        h: f64,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError> {
        fd_jacobians(|x, u| self.step_nominal(x, u), x, u, h)
    }

    /// Draws the stacked noise for all agents, one stream per agent.
    pub fn sample_noise<R: Rng>(&self, streams: &mut [R], model: &NoiseModel) -> ControlVec {
        let mut w = DVector::zeros(self.control_dim());
        for (j, rng) in streams.iter_mut().enumerate().take(self.agents()) {
            let wj = model.sample(rng);
            w[2 * j] = wj[0];
            w[2 * j + 1] = wj[1];
        }
        w
    }
}

/// Central-difference Jacobians of an arbitrary discrete map.
pub fn fd_jacobians<F>(
    step: F,
    x: &StateVec,
    u: &ControlVec,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), DynamicsError>
where
    F: Fn(&StateVec, &ControlVec) -> Result<StateVec, DynamicsError>,
{
    if !(h > 0.0) {
        return Err(DynamicsError::InvalidParameter(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let nx = x.len();
    let nu = u.len();
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    for i in 0..nx {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        let col = (step(&xp, u)? - step(&xm, u)?) / (2.0 * h);
        a.set_column(i, &col);
    }
    for i in 0..nu {
        let (mut up, mut um) = (u.clone(), u.clone());
        up[i] += h;
        um[i] -= h;
        let col = (step(x, &up)? - step(x, &um)?) / (2.0 * h);
        b.set_column(i, &col);
    }
    Ok((a, b))
}

/// Concatenates per-agent blocks in agent order.
pub fn stack_agents(blocks: &[DVector<f64>]) -> Result<DVector<f64>, DynamicsError> {
    let Some(first) = blocks.first() else {
        return Err(DynamicsError::InvalidParameter("no agents to stack".into()));
    };
    let width = first.len();
    if let Some(bad) = blocks.iter().find(|b| b.len() != width) {
        return Err(DynamicsError::Dimension {
            what: "agent block",
            expected: width,
            got: bad.len(),
        });
    }
    Ok(DVector::from_iterator(
        width * blocks.len(),
        blocks.iter().flat_map(|b| b.iter().copied()),
    ))
}

/// Splits a stacked vector into `agents` equal blocks.
pub fn unstack_agents(
    stacked: &DVector<f64>,
    agents: usize,
) -> Result<Vec<DVector<f64>>, DynamicsError> {
    if agents == 0 || stacked.len() % agents != 0 {
        return Err(DynamicsError::Dimension {
            what: "stacked vector",
            expected: agents.max(1) * (stacked.len() / agents.max(1)).max(1),
            got: stacked.len(),
        });
    }
    let width = stacked.len() / agents;
    Ok((0..agents)
        .map(|j| stacked.rows(j * width, width).into_owned())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn car() -> AgentSystem {
        AgentSystem::single(CarParams::default(), ControlLimits::default())
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn straight_step() {
        let next = car().step_nominal(&v(&[0., 0., 0., 0.]), &v(&[1., 0.])).unwrap();
        assert_eq!(next, v(&[0.1, 0., 0., 0.]));
    }

    #[test]
    fn step_facing_up() {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let next = car()
            .step_nominal(&v(&[0., 0., half_pi, 0.]), &v(&[1., 0.]))
            .unwrap();
        assert_abs_diff_eq!(next[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(next[1], 0.1, epsilon = 1e-15);
        assert_eq!(next[2], half_pi);
        assert_eq!(next[3], 0.0);
    }

    #[test]
    fn general_step_matches_hand_equations() {
        let (x, y, th, ph) = (1.0_f64, 2.0_f64, 0.3_f64, 0.1_f64);
        let (vel, om) = (0.7_f64, -0.2_f64);
        let (l, dt) = (0.5, 0.1);
        let expected = [
            x + vel * th.cos() * dt,
            y + vel * th.sin() * dt,
            th + vel / l * ph.tan() * dt,
            ph + om * dt,
        ];
        let next = car().step_nominal(&v(&[x, y, th, ph]), &v(&[vel, om])).unwrap();
        for k in 0..4 {
            assert_abs_diff_eq!(next[k], expected[k], epsilon = 1e-15);
        }
    }

    #[test]
    fn noisy_step_with_unit_velocity_noise() {
        let next = car()
            .step_noisy(&v(&[0., 0., 0., 0.]), &v(&[1., 0.]), &v(&[1., 0.]), 0.1)
            .unwrap();
        assert_abs_diff_eq!(next[0], 0.11, epsilon = 1e-15);
        assert_eq!(next.rows(1, 3).amax(), 0.0);
    }

    #[test]
    fn zero_noise_or_zero_scale_is_nominal() {
        let sys = car();
        let x = v(&[0.3, -0.2, 0.5, 0.2]);
        let u = v(&[0.8, 0.4]);
        let nominal = sys.step_nominal(&x, &u).unwrap();
        assert_eq!(sys.step_noisy(&x, &u, &v(&[0., 0.]), 0.5).unwrap(), nominal);
        assert_eq!(sys.step_noisy(&x, &u, &v(&[1.3, -2.0]), 0.0).unwrap(), nominal);
    }

    #[test]
    fn rejects_singular_steering_and_nan() {
        let sys = car();
        let bad = v(&[0., 0., 0., std::f64::consts::FRAC_PI_2 - 5e-4]);
        assert!(matches!(
            sys.step_nominal(&bad, &v(&[1., 0.])),
            Err(DynamicsError::SteeringSingularity { agent: 0, .. })
        ));
        assert!(matches!(
            sys.step_nominal(&v(&[f64::NAN, 0., 0., 0.]), &v(&[1., 0.])),
            Err(DynamicsError::NonFinite("state"))
        ));
        assert!(matches!(
            sys.step_nominal(&v(&[0., 0., 0.]), &v(&[1., 0.])),
            Err(DynamicsError::Dimension { .. })
        ));
    }

    #[test]
    fn jacobians_at_rest() {
        let (a, b) = car().jacobians(&v(&[0.; 4]), &v(&[0.; 2])).unwrap();
        assert_eq!(a, DMatrix::identity(4, 4));
        let mut expected = DMatrix::zeros(4, 2);
        expected[(0, 0)] = 0.1;
        expected[(3, 1)] = 0.1;
        assert_eq!(b, expected);
    }

    #[test]
    fn fd_is_exact_for_linear_maps() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.25, 2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[3.0, -1.0]);
        let step = |x: &StateVec, u: &ControlVec| Ok(&a * x + &b * u);
        for h in [1e-1, 1e-3, 0.7] {
            let (fa, fb) = fd_jacobians(step, &v(&[0.2, -1.0]), &v(&[0.4]), h).unwrap();
            assert_abs_diff_eq!(fa, a.clone(), epsilon = 1e-12);
            assert_abs_diff_eq!(fb, b.clone(), epsilon = 1e-12);
        }
    }

    #[test]
    fn fd_matches_analytic_at_cruise() {
        let sys = car();
        let (x, u) = (v(&[0.; 4]), v(&[1., 0.]));
        let (a, b) = sys.jacobians(&x, &u).unwrap();
        let (fa, fb) = sys.fd_jacobians(&x, &u, 1e-6).unwrap();
        assert!((a - fa).amax() < 1e-5);
        assert!((b - fb).amax() < 1e-5);
    }

    #[test]
    fn fd_error_is_second_order() {
        let sys = car();
        let (x, u) = (v(&[0.4, 0.1, 0.8, 0.6]), v(&[1.5, -0.4]));
        let (a, _) = sys.jacobians(&x, &u).unwrap();
        let err = |h: f64| (sys.fd_jacobians(&x, &u, h).unwrap().0 - &a).amax();
        let (e1, e2) = (err(4e-2), err(2e-2));
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn multi_agent_jacobians_are_block_diagonal() {
        let sys = AgentSystem::homogeneous(3, CarParams::default(), ControlLimits::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DVector::from_fn(12, |i, _| {
            if i % 4 == 3 {
                rng.gen_range(-1.0..1.0)
            } else {
                rng.gen_range(-3.0..3.0)
            }
        });
        let u = DVector::from_fn(6, |_, _| rng.gen_range(-2.0..2.0));
        let (a, b) = sys.jacobians(&x, &u).unwrap();
        let single = car();
        for i in 0..3 {
            for j in 0..3 {
                let ab = a.view((4 * i, 4 * j), (4, 4));
                let bb = b.view((4 * i, 2 * j), (4, 2));
                if i == j {
                    let (sa, sb) = single
                        .jacobians(
                            &x.rows(4 * i, 4).into_owned(),
                            &u.rows(2 * i, 2).into_owned(),
                        )
                        .unwrap();
                    assert_eq!(ab.into_owned(), sa);
                    assert_eq!(bb.into_owned(), sb);
                } else {
                    assert!(ab.iter().all(|&e| e == 0.0));
                    assert!(bb.iter().all(|&e| e == 0.0));
                }
            }
        }
    }

    #[test]
    fn costate_hessian_matches_fd_of_gradient() {
        let sys = car();
        let x = v(&[0.2, -0.3, 0.7, 0.35]);
        let u = v(&[1.2, 0.3]);
        let lam = v(&[0.9, -1.4, 2.1, 0.6]);
        let (hxx, hux, _) = sys.costate_hessian(&x, &u, &lam);
        // gradient of λᵀ f wrt x is Aᵀλ; differentiate it numerically
        let grad = |x: &StateVec, u: &ControlVec| {
            let (a, b) = sys.jacobians(x, u).unwrap();
            (a.transpose() * &lam, b.transpose() * &lam)
        };
        let h = 1e-6;
        for i in 0..4 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let (gp, gup) = grad(&xp, &u);
            let (gm, gum) = grad(&xm, &u);
            let col = (gp - gm) / (2.0 * h);
            let colu = (gup - gum) / (2.0 * h);
            for r in 0..4 {
                assert_abs_diff_eq!(hxx[(r, i)], col[r], epsilon = 1e-6);
            }
            for r in 0..2 {
                assert_abs_diff_eq!(hux[(r, i)], colu[r], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn noise_scaling_is_elementwise() {
        let model = NoiseModel::new(0.3, [2.0, 1.0]);
        assert_eq!(model.scale([0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(model.scale([1.0, -1.0]), [2.0, -1.0]);
    }

    #[test]
    fn noise_sample_statistics() {
        let model = NoiseModel::new(1.0, [2.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut s, mut s2) = ([0.0; 2], [0.0; 2]);
        for _ in 0..n {
            let w = model.sample(&mut rng);
            for k in 0..2 {
                s[k] += w[k];
                s2[k] += w[k] * w[k];
            }
        }
        for k in 0..2 {
            let mean = s[k] / n as f64;
            let std = (s2[k] / n as f64 - mean * mean).sqrt();
            let target = model.u_max[k];
            assert!(mean.abs() < 3.0 * target / (n as f64).sqrt(), "mean {mean}");
            assert!((std - target).abs() / target < 0.02, "std {std}");
        }
    }

    #[test]
    fn stacking_convention() {
        let a = v(&[1., 2., 3., 4.]);
        let b = v(&[5., 6., 7., 8.]);
        let s = stack_agents(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s, v(&[1., 2., 3., 4., 5., 6., 7., 8.]));
        assert_eq!(unstack_agents(&s, 2).unwrap(), vec![a.clone(), b]);
        assert_eq!(stack_agents(std::slice::from_ref(&a)).unwrap(), a);
        assert!(stack_agents(&[v(&[1.]), v(&[1., 2.])]).is_err());
        assert!(unstack_agents(&v(&[1., 2., 3.]), 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn control_affine(
            th in -3.0..3.0f64, ph in -1.2..1.2f64,
            v1 in -2.0..2.0f64, w1 in -2.0..2.0f64,
            v2 in -2.0..2.0f64, w2 in -2.0..2.0f64,
            alpha in -1.0..2.0f64,
        ) {
            let sys = car();
            let x = v(&[0.5, -0.5, th, ph]);
            let (u1, u2) = (v(&[v1, w1]), v(&[v2, w2]));
            let mix = &u1 * alpha + &u2 * (1.0 - alpha);
            let lhs = sys.step_nominal(&x, &mix).unwrap();
            let rhs = sys.step_nominal(&x, &u1).unwrap() * alpha
                + sys.step_nominal(&x, &u2).unwrap() * (1.0 - alpha);
            proptest::prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn stack_roundtrip(data in proptest::collection::vec(-10.0..10.0f64, 12)) {
            let s = DVector::from_vec(data);
            let parts = unstack_agents(&s, 3).unwrap();
            proptest::prop_assert_eq!(stack_agents(&parts).unwrap(), s);
        }
    }
}
