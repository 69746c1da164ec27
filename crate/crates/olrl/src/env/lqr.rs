//! Finite-horizon linear-quadratic environment.
//!
//! Dynamics `x' = A x + B u`, running reward `-(x^T Q x + u^T R u)`,
//! terminal reward `-x^T Qf x`. Because the dynamics are deterministic, the
//! optimal open-loop return from `x0` equals the optimal closed-loop
//! return, so the backward Riccati recursion is an exact oracle for both
//! the optimal value and an optimal action sequence. That makes this
//! environment the reference point for gradient and convergence checks.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{EnvSpec, Environment};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LqrEnv {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    qf: DMatrix<f64>,
    spec: EnvSpec,
}

fn check_symmetric(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::dims(format!("{name} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    let scale = 1.0 + m.amax();
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::invalid("LqrEnv", format!("{name} is not symmetric")));
            }
        }
    }
    Ok(())
}

fn check_psd(name: &'static str, m: &DMatrix<f64>) -> Result<()> {
    check_symmetric(name, m)?;
    let eigs = m.clone().symmetric_eigen().eigenvalues;
    let scale = 1.0 + m.amax();
    if eigs.iter().any(|&e| e < -1e-10 * scale) {
        return Err(Error::invalid("LqrEnv", format!("{name} is not positive semidefinite")));
    }
    Ok(())
}

impl LqrEnv {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qf: DMatrix<f64>,
        x0: DVector<f64>,
        horizon: usize,
    ) -> Result<Self> {
        let d = a.nrows();
        let k = b.ncols();
        if a.ncols() != d {
            return Err(Error::dims(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != d {
            return Err(Error::dims(format!("B has {} rows, expected {d}", b.nrows())));
        }
        if q.nrows() != d || r.nrows() != k || qf.nrows() != d {
            return Err(Error::dims("Q, R, Qf must match A/B dimensions".to_string()));
        }
        check_psd("Q", &q)?;
        check_psd("Qf", &qf)?;
        check_symmetric("R", &r)?;
        if r.clone().cholesky().is_none() {
            return Err(Error::invalid("LqrEnv", "R is not positive definite"));
        }
        let spec = EnvSpec::new(d, k, horizon, x0)?;
        Ok(LqrEnv { a, b, q, r, qf, spec })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Backward Riccati recursion; returns `P_0..P_T` with `P_T = Qf`, so
    /// the optimal return from state `x` at time `t` is `-x^T P_t x`.
    fn riccati(&self) -> Vec<DMatrix<f64>> {
        let t_end = self.spec.horizon;
        let mut ps = vec![DMatrix::zeros(0, 0); t_end + 1];
        ps[t_end] = self.qf.clone();
        for t in (0..t_end).rev() {
            let p_next = &ps[t + 1];
            let btp = self.b.transpose() * p_next;
            let s = &self.r + &btp * &self.b;
            let chol = s
                .clone()
                .cholesky()
                .expect("R PD and P PSD make R + B^T P B positive definite");
            let gain = chol.solve(&(&btp * &self.a));
            let closed = &self.a - &self.b * &gain;
            let mut p = &self.q + self.a.transpose() * p_next * closed;
            // keep the recursion symmetric against rounding drift
            p = (&p + p.transpose()) * 0.5;
            ps[t] = p;
        }
        ps
    }

    /// Analytic optimal return `-x0^T P_0 x0`.
    pub fn optimal_return(&self) -> f64 {
        let p0 = &self.riccati()[0];
        -(self.spec.x0.transpose() * p0 * &self.spec.x0)[(0, 0)]
    }

    /// An optimal open-loop action sequence, `T x K`.
    pub fn optimal_actions(&self) -> DMatrix<f64> {
        let ps = self.riccati();
        let t_end = self.spec.horizon;
        let mut actions = DMatrix::zeros(t_end, self.spec.action_dim);
        let mut x = self.spec.x0.clone();
        for t in 0..t_end {
            let p_next = &ps[t + 1];
            let btp = self.b.transpose() * p_next;
            let s = &self.r + &btp * &self.b;
            let chol = s.clone().cholesky().expect("positive definite");
            let u = -chol.solve(&(&btp * &self.a * &x));
            actions.row_mut(t).copy_from(&u.transpose());
            x = &self.a * x + &self.b * &u;
        }
        actions
    }

    /// Smoothness constant of the return: twice the spectral norm of the
    /// exact Hessian of `J` in the stacked action vector,
    /// `L = 2 lambda_max(G^T Qhat G + I_T (x) R)`, where block `(t-1, tau)`
    /// of `G` is `A^{t-1-tau} B` and `Qhat = diag(Q, ..., Q, Qf)` weights
    /// the states `x_1..x_T` that actions can influence.
    pub fn smoothness_bound(&self) -> f64 {
        let d = self.spec.state_dim;
        let k = self.spec.action_dim;
        let t_end = self.spec.horizon;

        let mut a_pow = Vec::with_capacity(t_end);
        a_pow.push(DMatrix::identity(d, d));
        for j in 1..t_end {
            let next = &a_pow[j - 1] * &self.a;
            a_pow.push(next);
        }

        let mut g = DMatrix::zeros(t_end * d, t_end * k);
        for t in 1..=t_end {
            for tau in 0..t {
                let block = &a_pow[t - 1 - tau] * &self.b;
                g.view_mut(((t - 1) * d, tau * k), (d, k)).copy_from(&block);
            }
        }
        let mut qhat = DMatrix::zeros(t_end * d, t_end * d);
        for t in 1..=t_end {
            let w = if t == t_end { &self.qf } else { &self.q };
            qhat.view_mut(((t - 1) * d, (t - 1) * d), (d, d)).copy_from(w);
        }
        let mut h = g.transpose() * qhat * g;
        for t in 0..t_end {
            let mut blk = h.view_mut((t * k, t * k), (k, k));
            blk += &self.r;
        }
        h = (&h + h.transpose()) * 0.5;
        let eigs = h.symmetric_eigen().eigenvalues;
        2.0 * eigs.iter().fold(0.0f64, |m, &e| m.max(e))
    }

    /// Random well-conditioned instance for test batteries: `A` scaled to
    /// spectral radius 0.8, modest `B`, `Q` small PSD, `R = I`, `Qf = I`.
    pub fn random_stable(d: usize, k: usize, horizon: usize, rng: &mut impl Rng) -> LqrEnv {
        let mut a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let rho = a
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0f64, f64::max);
        if rho > 1e-9 {
            a *= 0.8 / rho;
        }
        let b = DMatrix::from_fn(d, k, |_, _| rng.random_range(-0.7..0.7));
        let w = DMatrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
        let q = &w * w.transpose() + DMatrix::identity(d, d) * 0.05;
        let r = DMatrix::identity(k, k);
        let qf = DMatrix::identity(d, d);
        let x0 = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        LqrEnv::new(a, b, q, r, qf, x0, horizon).expect("constructed to be valid")
    }
}

impl Environment for LqrEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn reward(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        -((x.transpose() * &self.q * x)[(0, 0)] + (u.transpose() * &self.r * u)[(0, 0)])
    }

    fn terminal_reward(&self, x: &DVector<f64>) -> f64 {
        -(x.transpose() * &self.qf * x)[(0, 0)]
    }

    fn reward_grad_x(&self, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        (&self.q * x) * -2.0
    }

    fn reward_grad_u(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        (&self.r * u) * -2.0
    }

    fn terminal_reward_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        (&self.qf * x) * -2.0
    }
}
