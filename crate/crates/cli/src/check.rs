//! The `check` command: oracle and invariant suites that need no config.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlqr_core::controllers::{ControllerConfig, ControllerKind};
use tlqr_core::costs::{CostModel, CostWeights};
use tlqr_core::dynamics::{AgentSystem, CarParams, ControlLimits};
use tlqr_core::feedback::{closed_loop_cost, riccati_backward, LinearizedSystem, LqrWeights};
use tlqr_core::scenario::Scenario;
use tlqr_core::simulation::{high_noise_dp_check, reference_plan, run_episode, DpProblem, EpisodeSpec};
use tlqr_core::trajopt::{constrain, SolverSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

fn random_psd(rng: &mut ChaCha8Rng, n: usize, shift: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * shift
}

fn random_ltv(rng: &mut ChaCha8Rng, nx: usize, nu: usize, h: usize) -> LinearizedSystem {
    LinearizedSystem {
        a: (0..h)
            .map(|_| DMatrix::identity(nx, nx) + DMatrix::from_fn(nx, nx, |_, _| rng.gen_range(-0.3..0.3)))
            .collect(),
        b: (0..h).map(|_| DMatrix::from_fn(nx, nu, |_, _| rng.gen_range(-1.0..1.0))).collect(),
    }
}

/// Optimal cost over open-loop sequences, from the stacked normal equations.
pub fn batch_optimum(lin: &LinearizedSystem, w: &LqrWeights, dx0: &DVector<f64>) -> Option<f64> {
    let h = lin.horizon();
    let (nx, nu) = lin.b[0].shape();
    let mut sx = DMatrix::zeros(nx * h, nx);
    let mut su = DMatrix::zeros(nx * h, nu * h);
    let mut phi = DMatrix::identity(nx, nx);
    for t in 0..h {
        phi = &lin.a[t] * &phi;
        sx.view_mut((nx * t, 0), (nx, nx)).copy_from(&phi);
        for s in 0..=t {
            let mut m = lin.b[s].clone();
            for k in (s + 1)..=t {
                m = &lin.a[k] * m;
            }
            su.view_mut((nx * t, nu * s), (nx, nu)).copy_from(&m);
        }
    }
    let mut qbar = DMatrix::zeros(nx * h, nx * h);
    let mut rbar = DMatrix::zeros(nu * h, nu * h);
    for t in 0..h {
        let q = if t + 1 == h { &w.q_f } else { &w.q };
        qbar.view_mut((nx * t, nx * t), (nx, nx)).copy_from(q);
        rbar.view_mut((nu * t, nu * t), (nu, nu)).copy_from(&w.r);
    }
    let hess = su.transpose() * &qbar * &su + &rbar;
    let lin_term = su.transpose() * &qbar * &sx * dx0;
    let du = -hess.cholesky()?.solve(&lin_term);
    let dx = &sx * dx0 + &su * &du;
    Some(dx0.dot(&(&w.q * dx0)) + dx.dot(&(&qbar * &dx)) + du.dot(&(&rbar * &du)))
}

/// Largest relative gap between the Riccati closed loop and the batch optimum
/// over `systems` random LTV problems.
pub fn riccati_batch_gap(systems: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..systems {
        let lin = random_ltv(&mut rng, 4, 2, 10);
        let w = LqrWeights {
            q: random_psd(&mut rng, 4, 0.0),
            r: random_psd(&mut rng, 2, 0.1),
            q_f: random_psd(&mut rng, 4, 0.0),
        };
        let dx0 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let gap = match (riccati_backward(&lin, &w), batch_optimum(&lin, &w, &dx0)) {
            (Ok(gs), Some(batch)) => (closed_loop_cost(&lin, &w, &gs, &dx0) - batch).abs() / batch.abs().max(1e-300),
            _ => f64::INFINITY,
        };
        worst = worst.max(gap);
    }
    worst
}

/// Gain and cost-to-go at `t = 0` for `A = B = Q = R = Q_f = 1`.
pub fn scalar_riccati(horizon: usize) -> Option<(f64, f64)> {
    let one = || DMatrix::from_element(1, 1, 1.0);
    let lin = LinearizedSystem {
        a: vec![one(); horizon],
        b: vec![one(); horizon],
    };
    let w = LqrWeights {
        q: one(),
        r: one(),
        q_f: one(),
    };
    let gs = riccati_backward(&lin, &w).ok()?;
    Some((gs.gains[0][(0, 0)], gs.cost_to_go[0][(0, 0)]))
}

pub fn check_riccati() -> CheckResult {
    let gap = riccati_batch_gap(50, 2024);
    let h1 = scalar_riccati(1);
    let h2 = scalar_riccati(2);
    let passed = gap <= 1e-8 && h1 == Some((0.5, 1.5)) && h2 == Some((0.6, 1.6));
    CheckResult::new(
        "riccati",
        passed,
        format!("worst relative gap to batch optimum {gap:.2e}; scalar H=1 {h1:?}, H=2 {h2:?}"),
    )
}

/// Largest entrywise gap between analytic and central-difference Jacobians,
/// and the largest cross-agent entry of the analytic ones.
pub fn jacobian_gaps(samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agents = 3;
    let sys = AgentSystem::homogeneous(agents, CarParams::default(), ControlLimits::default());
    let (mut fd_gap, mut cross): (f64, f64) = (0.0, 0.0);
    for _ in 0..samples {
        let x = DVector::from_fn(4 * agents, |i, _| match i % 4 {
            0 | 1 => rng.gen_range(-5.0..5.0),
            2 => rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            _ => rng.gen_range(-1.2..1.2),
        });
        let u = DVector::from_fn(2 * agents, |_, _| rng.gen_range(-2.0..2.0));
        let (Ok((a, b)), Ok((fa, fb))) = (sys.jacobians(&x, &u), sys.fd_jacobians(&x, &u, 1e-6)) else {
            return (f64::INFINITY, f64::INFINITY);
        };
        fd_gap = fd_gap.max((&a - fa).amax()).max((&b - fb).amax());
        for j in 0..agents {
            for k in (0..agents).filter(|&k| k != j) {
                cross = cross
                    .max(a.view((4 * j, 4 * k), (4, 4)).amax())
                    .max(b.view((4 * j, 2 * k), (4, 2)).amax());
            }
        }
    }
    (fd_gap, cross)
}

pub fn check_jacobians() -> CheckResult {
    let (gap, cross) = jacobian_gaps(1000, 7);
    CheckResult::new(
        "jacobians",
        gap <= 1e-5 && cross == 0.0,
        format!("worst analytic/central-difference gap {gap:.2e}; largest cross-agent entry {cross}"),
    )
}

pub fn check_dp() -> CheckResult {
    let eps = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, f64::INFINITY];
    match high_noise_dp_check(&DpProblem::delayed_reward(), &eps) {
        Ok(report) => {
            let first = report.points[0].agreement;
            let last = report.points[eps.len() - 1].agreement;
            let agreements: Vec<String> = report.points.iter().map(|p| format!("{:.3}", p.agreement)).collect();
            CheckResult::new(
                "dp_greedy_limit",
                first < 1.0 && last == 1.0 && report.agreement_nondecreasing(),
                format!("agreement along ε {eps:?}: [{}]", agreements.join(", ")),
            )
        }
        Err(e) => CheckResult::new("dp_greedy_limit", false, e.to_string()),
    }
}

pub fn check_constrain() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let sys = AgentSystem::homogeneous(2, CarParams::default(), ControlLimits::default());
    let (lo, hi, rate) = (sys.u_min(), sys.u_max(), sys.du_max());
    let mut ok = true;
    for _ in 0..1000 {
        let prev = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
        let u = DVector::from_fn(4, |_, _| rng.gen_range(-6.0..6.0));
        let c = constrain(&u, &prev, &sys);
        for i in 0..4 {
            ok &= c[i] >= lo[i] && c[i] <= hi[i] && (c[i] - prev[i]).abs() <= rate[i] + 1e-12;
        }
        ok &= constrain(&c, &prev, &sys) == c;
    }
    CheckResult::new(
        "constrain",
        ok,
        "1000 random requests land in the box and rate limits and are fixed points".into(),
    )
}

fn small_scenario() -> Scenario {
    let state = DMatrix::from_diagonal(&DVector::from_column_slice(&[5.0, 5.0, 1.0, 0.1]));
    let weights = CostWeights {
        terminal: &state * 100.0,
        state,
        control: DMatrix::identity(2, 2),
        goal: DVector::from_column_slice(&[1.0, 0.5, 0.0, 0.0]),
    };
    let system = AgentSystem::single(CarParams::default(), ControlLimits::default());
    Scenario::new(
        system,
        CostModel::new(weights, None, 1),
        DVector::zeros(4),
        15,
        SolverSettings::default(),
    )
}

pub fn check_determinism() -> CheckResult {
    let scenario = small_scenario();
    let nominal = match reference_plan(&scenario) {
        Ok(p) => p.cost,
        Err(e) => return CheckResult::new("determinism", false, e.to_string()),
    };
    let spec = EpisodeSpec {
        controller: ControllerConfig::new(ControllerKind::Tlqr2),
        epsilon: 0.3,
        seed: 42,
    };
    let (a, b) = match (run_episode(&scenario, nominal, &spec), run_episode(&scenario, nominal, &spec)) {
        (Ok(a), Ok(b)) => (a.record, b.record),
        (Err(e), _) | (_, Err(e)) => return CheckResult::new("determinism", false, e.to_string()),
    };
    let replay = a.replay_states(&scenario.system);
    let same = a == b && a.cost.to_bits() == b.cost.to_bits();
    let replayed = replay.as_ref() == Ok(&a.states);
    CheckResult::new(
        "determinism",
        same && replayed,
        format!("re-run identical: {same}; replay from logged noise identical: {replayed}"),
    )
}

pub fn run_checks() -> Vec<CheckResult> {
    vec![
        check_riccati(),
        check_jacobians(),
        check_constrain(),
        check_dp(),
        check_determinism(),
    ]
}
