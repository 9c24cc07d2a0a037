//! Riccati recursion against a batch least-squares solution, and the joint
//! block-diagonal design against independent per-agent designs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tlqr_core::feedback::{closed_loop_cost, riccati_backward, riccati_residual, LinearizedSystem, LqrWeights};

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

/// Minimum over open-loop sequences of the same quadratic cost, by stacking
/// the dynamics into `δX = S_x δx₀ + S_u δU` and solving the normal equations.
fn batch_optimum(lin: &LinearizedSystem, w: &LqrWeights, dx0: &DVector<f64>) -> f64 {
    let h = lin.horizon();
    let (nx, nu) = lin.b[0].shape();
    // states δx₁..δx_H
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
    for t in 0..h {
        let q = if t + 1 == h { &w.q_f } else { &w.q };
        qbar.view_mut((nx * t, nx * t), (nx, nx)).copy_from(q);
    }
    let mut rbar = DMatrix::zeros(nu * h, nu * h);
    for t in 0..h {
        rbar.view_mut((nu * t, nu * t), (nu, nu)).copy_from(&w.r);
    }
    let hess = su.transpose() * &qbar * &su + &rbar;
    let lin_term = su.transpose() * &qbar * &sx * dx0;
    let du = -hess.cholesky().expect("positive definite").solve(&lin_term);
    let dx = &sx * dx0 + &su * &du;
    dx0.dot(&(&w.q * dx0)) + dx.dot(&(&qbar * &dx)) + du.dot(&(&rbar * &du))
}

#[test]
fn closed_loop_cost_equals_batch_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let lin = random_ltv(&mut rng, 4, 2, 10);
        let w = LqrWeights {
            q: random_psd(&mut rng, 4, 0.0),
            r: random_psd(&mut rng, 2, 0.1),
            q_f: random_psd(&mut rng, 4, 0.0),
        };
        let gs = riccati_backward(&lin, &w).unwrap();
        assert!(riccati_residual(&lin, &w, &gs) < 1e-10);
        let dx0 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
        let riccati = closed_loop_cost(&lin, &w, &gs, &dx0);
        let batch = batch_optimum(&lin, &w, &dx0);
        assert!((riccati - batch).abs() <= 1e-8 * batch.abs(), "{riccati} vs {batch}");
        // the value function predicts the same number
        let predicted = dx0.dot(&(&gs.cost_to_go[0] * &dx0));
        assert!((predicted - batch).abs() <= 1e-8 * batch.abs());
    }
}

#[test]
fn feedback_beats_random_open_loop_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let lin = random_ltv(&mut rng, 4, 2, 10);
    let w = LqrWeights {
        q: random_psd(&mut rng, 4, 0.0),
        r: random_psd(&mut rng, 2, 0.1),
        q_f: random_psd(&mut rng, 4, 0.0),
    };
    let gs = riccati_backward(&lin, &w).unwrap();
    let dx0 = DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0));
    let best = closed_loop_cost(&lin, &w, &gs, &dx0);
    for _ in 0..100 {
        let mut dx = dx0.clone();
        let mut cost = 0.0;
        for t in 0..10 {
            let du = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            cost += dx.dot(&(&w.q * &dx)) + du.dot(&(&w.r * &du));
            dx = &lin.a[t] * &dx + &lin.b[t] * &du;
        }
        cost += dx.dot(&(&w.q_f * &dx));
        assert!(best <= cost + 1e-12);
    }
}

#[test]
fn cost_to_go_stays_positive_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let lin = random_ltv(&mut rng, 4, 2, 10);
        let w = LqrWeights {
            q: random_psd(&mut rng, 4, 0.0),
            r: random_psd(&mut rng, 2, 0.1),
            q_f: random_psd(&mut rng, 4, 0.0),
        };
        let gs = riccati_backward(&lin, &w).unwrap();
        assert_eq!(gs.cost_to_go[10], w.q_f);
        for p in &gs.cost_to_go {
            assert_eq!(p, &p.transpose());
            assert!(p.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        }
    }
}

#[test]
fn joint_block_diagonal_design_matches_per_agent_designs() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let agents = 3;
    let per_agent_lin: Vec<LinearizedSystem> = (0..agents).map(|_| random_ltv(&mut rng, 4, 2, 10)).collect();
    let per_agent_w: Vec<LqrWeights> = (0..agents)
        .map(|_| LqrWeights {
            q: random_psd(&mut rng, 4, 0.0),
            r: random_psd(&mut rng, 2, 0.1),
            q_f: random_psd(&mut rng, 4, 0.0),
        })
        .collect();
    let diag = |ms: Vec<&DMatrix<f64>>| tlqr_core::costs::block_diag(ms.into_iter());
    let joint_lin = LinearizedSystem {
        a: (0..10).map(|t| diag(per_agent_lin.iter().map(|l| &l.a[t]).collect())).collect(),
        b: (0..10).map(|t| diag(per_agent_lin.iter().map(|l| &l.b[t]).collect())).collect(),
    };
    let joint_w = LqrWeights {
        q: diag(per_agent_w.iter().map(|w| &w.q).collect()),
        r: diag(per_agent_w.iter().map(|w| &w.r).collect()),
        q_f: diag(per_agent_w.iter().map(|w| &w.q_f).collect()),
    };
    let joint = riccati_backward(&joint_lin, &joint_w).unwrap();
    for j in 0..agents {
        let single = riccati_backward(&joint_lin.agent_block(j), &joint_w.agent_block(j)).unwrap();
        for t in 0..=10 {
            let p = &joint.cost_to_go[t];
            let block = p.view((4 * j, 4 * j), (4, 4));
            let scale = 1.0 + single.cost_to_go[t].amax();
            assert!((block - &single.cost_to_go[t]).amax() <= 1e-10 * scale);
            for k in 0..agents {
                if k != j {
                    assert!(p.view((4 * j, 4 * k), (4, 4)).amax() <= 1e-10 * scale);
                }
            }
        }
        for t in 0..10 {
            let block = joint.gains[t].view((2 * j, 4 * j), (2, 4));
            assert!((block - &single.gains[t]).amax() <= 1e-10 * (1.0 + single.gains[t].amax()));
        }
    }
}
