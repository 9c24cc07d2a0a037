//! Inequality-constrained linear-quadratic subproblem solved by a
//! Riccati-structured primal-dual interior-point method (Mehrotra
//! predictor-corrector).
//!
//! ```text
//! min  Σ_t ½ wₜᵀ Hₜ wₜ + gₜᵀ wₜ  +  ½ z_Nᵀ H_N z_N + g_Nᵀ z_N,   wₜ = (zₜ, uₜ)
//! s.t. zₜ₊₁ = Aₜ zₜ + Bₜ uₜ,  z₀ = 0,
//!      Cₜ zₜ + Dₜ uₜ ≤ bₜ
//! ```

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

#[derive(Debug, Clone)]
pub(crate) struct Stage {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub hzz: DMatrix<f64>,
    pub huz: DMatrix<f64>,
    pub huu: DMatrix<f64>,
    pub gz: DVector<f64>,
    pub gu: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Problem {
    pub stages: Vec<Stage>,
    pub hzz_terminal: DMatrix<f64>,
    pub gz_terminal: DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub z: Vec<DVector<f64>>,
    pub u: Vec<DVector<f64>>,
    /// Inequality multipliers per stage.
    pub y: Vec<DVector<f64>>,
    pub iterations: usize,
    pub converged: bool,
    /// Feedback gains of the last factorization, barrier terms included.
    pub gains: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum LqpError {
    /// The reduced Hessian is not positive definite at `stage`.
    NotConvex { stage: usize },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpmSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            max_iterations: 80,
            tolerance: 1e-10,
        }
    }
}

struct Factor {
    k: Vec<DMatrix<f64>>,
    chol: Vec<Cholesky<f64, Dyn>>,
}

/// Backward Riccati factorization with the barrier-weighted constraint
/// curvature `[C D]ᵀ diag(σ) [C D]` added to every stage.
fn factor(p: &Problem, sigma: Option<&[DVector<f64>]>) -> Result<Factor, LqpError> {
    let n = p.stages.len();
    let mut v = p.hzz_terminal.clone();
    let mut ks = Vec::with_capacity(n);
    let mut chols = Vec::with_capacity(n);
    for t in (0..n).rev() {
        let s = &p.stages[t];
        let va = &v * &s.a;
        let vb = &v * &s.b;
        let mut qzz = &s.hzz + s.a.transpose() * &va;
        let mut quz = &s.huz + s.b.transpose() * &va;
        let mut quu = &s.huu + s.b.transpose() * &vb;
        if let Some(sig) = sigma {
            let sc = scale_rows(&s.c, &sig[t]);
            let sd = scale_rows(&s.d, &sig[t]);
            qzz += s.c.transpose() * &sc;
            quz += s.d.transpose() * &sc;
            quu += s.d.transpose() * &sd;
        }
        let chol = Cholesky::new(quu).ok_or(LqpError::NotConvex { stage: t })?;
        let k = -chol.solve(&quz);
        let mut next = qzz + quz.transpose() * &k;
        next = (&next + next.transpose()) * 0.5;
        v = next;
        ks.push(k);
        chols.push(chol);
    }
    ks.reverse();
    chols.reverse();
    Ok(Factor { k: ks, chol: chols })
}

fn scale_rows(m: &DMatrix<f64>, by: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= by[i];
    }
    out
}

/// Solves the factored LQ problem for linear terms `(qz, qu)`, `qz_N`.
fn solve_linear(
    p: &Problem,
    f: &Factor,
    qz: &[DVector<f64>],
    qu: &[DVector<f64>],
    qz_terminal: &DVector<f64>,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let n = p.stages.len();
    let mut v = qz_terminal.clone();
    let mut kff = vec![DVector::zeros(0); n];
    for t in (0..n).rev() {
        let s = &p.stages[t];
        let qu_t = &qu[t] + s.b.transpose() * &v;
        let qz_t = &qz[t] + s.a.transpose() * &v;
        kff[t] = -f.chol[t].solve(&qu_t);
        v = qz_t + f.k[t].transpose() * &qu_t;
    }
    let nz = p.hzz_terminal.nrows();
    let mut z = Vec::with_capacity(n + 1);
    let mut u = Vec::with_capacity(n);
    z.push(DVector::zeros(nz));
    for t in 0..n {
        let s = &p.stages[t];
        let ut = &f.k[t] * &z[t] + &kff[t];
        let zn = &s.a * &z[t] + &s.b * &ut;
        u.push(ut);
        z.push(zn);
    }
    (z, u)
}

/// Checks that the unconstrained LQ problem is strictly convex.
pub(crate) fn check_convex(p: &Problem) -> Result<(), LqpError> {
    factor(p, None).map(|_| ())
}

/// Gradient of the Lagrangian with respect to the controls, with the
/// dynamics eliminated by an adjoint sweep.
pub(crate) fn reduced_gradient(
    p: &Problem,
    z: &[DVector<f64>],
    u: &[DVector<f64>],
    y: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let n = p.stages.len();
    let mut lam = &p.hzz_terminal * &z[n] + &p.gz_terminal;
    let mut out = vec![DVector::zeros(0); n];
    for t in (0..n).rev() {
        let s = &p.stages[t];
        let gu = &s.huz * &z[t] + &s.huu * &u[t] + &s.gu + s.d.transpose() * &y[t] + s.b.transpose() * &lam;
        let gz = &s.hzz * &z[t] + s.huz.transpose() * &u[t] + &s.gz + s.c.transpose() * &y[t] + s.a.transpose() * &lam;
        out[t] = gu;
        lam = gz;
    }
    out
}

fn max_step(v: &[DVector<f64>], dv: &[DVector<f64>]) -> f64 {
    let mut alpha: f64 = 1.0;
    for (vi, dvi) in v.iter().zip(dv) {
        for (a, da) in vi.iter().zip(dvi.iter()) {
            if *da < 0.0 {
                alpha = alpha.min(-a / da);
            }
        }
    }
    alpha
}

fn dot_all(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn inf_norm(v: &[DVector<f64>]) -> f64 {
    v.iter().map(|x| x.amax()).fold(0.0, f64::max)
}

/// Interior-point solve. `duals` seeds the multipliers, which lets the
/// barrier weights of constraints active in a previous solve convexify the
/// first Newton system.
pub(crate) fn solve(p: &Problem, settings: &IpmSettings, duals: Option<&[DVector<f64>]>) -> Result<Solution, LqpError> {
    let n = p.stages.len();
    let nz = p.hzz_terminal.nrows();
    let m_total: usize = p.stages.iter().map(|s| s.rhs.len()).sum();

    let mut z: Vec<DVector<f64>> = vec![DVector::zeros(nz); n + 1];
    let mut u: Vec<DVector<f64>> = p.stages.iter().map(|s| DVector::zeros(s.b.ncols())).collect();

    if m_total == 0 {
        let f = factor(p, None)?;
        let qz: Vec<_> = p.stages.iter().map(|s| s.gz.clone()).collect();
        let qu: Vec<_> = p.stages.iter().map(|s| s.gu.clone()).collect();
        let (z, u) = solve_linear(p, &f, &qz, &qu, &p.gz_terminal);
        let y = p.stages.iter().map(|_| DVector::zeros(0)).collect();
        return Ok(Solution {
            z,
            u,
            y,
            iterations: 1,
            converged: true,
            gains: f.k,
        });
    }

    let grad_scale = 1.0
        + p.stages
            .iter()
            .map(|s| s.gu.amax().max(s.gz.amax()))
            .fold(p.gz_terminal.amax(), f64::max);
    let rhs_scale = 1.0 + inf_norm(&p.stages.iter().map(|s| s.rhs.clone()).collect::<Vec<_>>());

    let mut s: Vec<DVector<f64>> = p.stages.iter().map(|st| st.rhs.map(|b| b.max(1e-2))).collect();
    let mut y: Vec<DVector<f64>> = match duals {
        Some(d) if d.len() == n && d.iter().zip(&p.stages).all(|(y, st)| y.len() == st.rhs.len()) => {
            d.iter().map(|y| y.map(|v| v.max(1.0))).collect()
        }
        _ => p.stages.iter().map(|st| DVector::from_element(st.rhs.len(), 1.0)).collect(),
    };

    let tol = settings.tolerance;
    let mut gains = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..settings.max_iterations {
        iterations = it + 1;
        // primal residual r_p = C z + D u + s − b
        let rp: Vec<DVector<f64>> = (0..n)
            .map(|t| {
                let st = &p.stages[t];
                &st.c * &z[t] + &st.d * &u[t] + &s[t] - &st.rhs
            })
            .collect();
        let mu = dot_all(&s, &y) / m_total as f64;
        let rd = reduced_gradient(p, &z, &u, &y);
        if inf_norm(&rp) <= tol * rhs_scale && inf_norm(&rd) <= tol * grad_scale && mu <= tol * grad_scale {
            converged = true;
            break;
        }

        let sigma: Vec<DVector<f64>> = (0..n).map(|t| y[t].component_div(&s[t])).collect();
        let f = match factor(p, Some(&sigma)) {
            Ok(f) => f,
            Err(e) => {
                // the barrier system is exhausted; accept a nearly converged iterate
                let loose = 100.0 * tol;
                if inf_norm(&rp) <= loose * rhs_scale && inf_norm(&rd) <= loose * grad_scale && mu <= loose * grad_scale {
                    converged = true;
                    break;
                }
                return Err(e);
            }
        };
        let grad_z: Vec<DVector<f64>> = (0..n)
            .map(|t| {
                let st = &p.stages[t];
                &st.hzz * &z[t] + st.huz.transpose() * &u[t] + &st.gz
            })
            .collect();
        let grad_u: Vec<DVector<f64>> = (0..n)
            .map(|t| {
                let st = &p.stages[t];
                &st.huz * &z[t] + &st.huu * &u[t] + &st.gu
            })
            .collect();
        let grad_terminal = &p.hzz_terminal * &z[n] + &p.gz_terminal;

        let newton = |corr: Option<(&[DVector<f64>], f64)>| {
            // step form: the barrier terms only multiply residual-sized quantities
            // w_t = (σμ − Δs∘Δy)/s + Σ r_p
            let weights: Vec<DVector<f64>> = (0..n)
                .map(|t| {
                    let mut w = sigma[t].component_mul(&rp[t]);
                    if let Some((c, target)) = corr {
                        for i in 0..w.len() {
                            w[i] += (target - c[t][i]) / s[t][i];
                        }
                    }
                    w
                })
                .collect();
            let qz: Vec<_> = (0..n).map(|t| &grad_z[t] + p.stages[t].c.transpose() * &weights[t]).collect();
            let qu: Vec<_> = (0..n).map(|t| &grad_u[t] + p.stages[t].d.transpose() * &weights[t]).collect();
            let (dz, du) = solve_linear(p, &f, &qz, &qu, &grad_terminal);
            let ds: Vec<DVector<f64>> = (0..n)
                .map(|t| -&rp[t] - &p.stages[t].c * &dz[t] - &p.stages[t].d * &du[t])
                .collect();
            let dy: Vec<DVector<f64>> = (0..n)
                .map(|t| &weights[t] - sigma[t].component_mul(&ds[t]) - sigma[t].component_mul(&rp[t]) - &y[t])
                .collect();
            (dz, du, ds, dy)
        };

        // predictor
        let (_, _, ds_aff, dy_aff) = newton(None);
        let ap = max_step(&s, &ds_aff);
        let ad = max_step(&y, &dy_aff);
        let mut mu_aff = 0.0;
        for t in 0..n {
            for i in 0..s[t].len() {
                mu_aff += (s[t][i] + ap * ds_aff[t][i]) * (y[t][i] + ad * dy_aff[t][i]);
            }
        }
        mu_aff /= m_total as f64;
        let centering = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let cross: Vec<DVector<f64>> = (0..n).map(|t| ds_aff[t].component_mul(&dy_aff[t])).collect();

        // corrector
        let (dz, du, ds, dy) = newton(Some((&cross, centering * mu)));
        let tau = (1.0 - mu).clamp(0.95, 0.995);
        // stationarity couples primal and dual, so both take the same step
        let ap = (tau * max_step(&s, &ds).min(max_step(&y, &dy))).min(1.0);
        for t in 0..n {
            u[t] += &du[t] * ap;
            s[t] += &ds[t] * ap;
            y[t] += &dy[t] * ap;
        }
        for t in 0..=n {
            z[t] += &dz[t] * ap;
        }
        gains = f.k;
    }

    Ok(Solution {
        z,
        u,
        y,
        iterations,
        converged,
        gains,
    })
}
