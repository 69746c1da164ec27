//! Dynamics-Jacobian estimators.
//!
//! Four ways to produce the `(A_t, B_t)` matrices the backward sweep needs:
//! finite-difference probes of the true dynamics (the oracle), a
//! differentiable model, per-step batch least squares over perturbed
//! rollouts (with and without an affine offset), and a per-step recursive
//! least-squares filter with forgetting that learns across iterations from
//! single rollouts.
//!
//! All estimates use gradient layout, `(grad_y f)_{i,j} = d f_j / d y_i`.

use nalgebra::{DMatrix, DVector};

use crate::env::{Environment, Trajectory};
use crate::models::DifferentiableModel;
use crate::pontryagin::JacobianProvider;
use crate::{Error, Result};

/// Default probe step for [`oracle_jacobians`].
pub const ORACLE_STEP: f64 = 1e-6;

/// One step's Jacobian estimate (gradient layout), plus the affine offset
/// for estimators that fit one.
#[derive(Debug, Clone)]
pub struct JacobianEstimate {
    /// `D x D`, estimate of `grad_x f`.
    pub a: DMatrix<f64>,
    /// `K x D`, estimate of `grad_u f`.
    pub b: DMatrix<f64>,
    /// Affine offset `c_t`, if the estimator fits one.
    pub c: Option<DVector<f64>>,
    pub t: usize,
}

/// Central finite differences of `env.step`, column by column; `2 (D + K)`
/// dynamics evaluations, which do not count as rollouts.
pub fn oracle_jacobians(
    env: &dyn Environment,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<JacobianEstimate> {
    if !(h > 0.0) {
        return Err(Error::invalid("oracle step", format!("h must be > 0, got {h}")));
    }
    let d = x.len();
    let k = u.len();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DMatrix::zeros(k, d);
    let scale = 0.5 / h;

    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..d {
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        let fp = env.step(&xp, u);
        let fm = env.step(&xm, u);
        xp[i] = x[i];
        xm[i] = x[i];
        for j in 0..d {
            let v = (fp[j] - fm[j]) * scale;
            if !v.is_finite() {
                return Err(Error::DivergedProbe);
            }
            a[(i, j)] = v;
        }
    }
    let mut up = u.clone();
    let mut um = u.clone();
    for i in 0..k {
        up[i] = u[i] + h;
        um[i] = u[i] - h;
        let fp = env.step(x, &up);
        let fm = env.step(x, &um);
        up[i] = u[i];
        um[i] = u[i];
        for j in 0..d {
            let v = (fp[j] - fm[j]) * scale;
            if !v.is_finite() {
                return Err(Error::DivergedProbe);
            }
            b[(i, j)] = v;
        }
    }
    Ok(JacobianEstimate { a, b, c: None, t: 0 })
}

/// Jacobians from a differentiable model at `(x, u)`.
pub fn model_jacobians(
    model: &dyn DifferentiableModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<JacobianEstimate> {
    let (a, b) = model.jacobians(x, u)?;
    Ok(JacobianEstimate { a, b, c: None, t: 0 })
}

/// Provider that probes the true environment with central differences.
pub struct OracleProvider<'e> {
    env: &'e dyn Environment,
    h: f64,
}

impl<'e> OracleProvider<'e> {
    pub fn new(env: &'e dyn Environment) -> Self {
        OracleProvider { env, h: ORACLE_STEP }
    }

    pub fn with_step(env: &'e dyn Environment, h: f64) -> Self {
        OracleProvider { env, h }
    }
}

impl JacobianProvider for OracleProvider<'_> {
    fn jacobians(&mut self, t: usize, traj: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let est = oracle_jacobians(self.env, &traj.states[t], &traj.action(t), self.h)?;
        Ok((est.a, est.b))
    }
}

/// Provider that differentiates a model along the queried trajectory.
pub struct ModelProvider<'m> {
    model: &'m dyn DifferentiableModel,
}

impl<'m> ModelProvider<'m> {
    pub fn new(model: &'m dyn DifferentiableModel) -> Self {
        ModelProvider { model }
    }
}

impl JacobianProvider for ModelProvider<'_> {
    fn jacobians(&mut self, t: usize, traj: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.model.jacobians(&traj.states[t], &traj.action(t))
    }
}

/// Provider serving precomputed per-step estimates (batch fits).
pub struct FittedProvider {
    estimates: Vec<JacobianEstimate>,
}

impl FittedProvider {
    pub fn new(estimates: Vec<JacobianEstimate>) -> Self {
        FittedProvider { estimates }
    }
}

impl JacobianProvider for FittedProvider {
    fn jacobians(&mut self, t: usize, _traj: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let est = self.estimates.get(t).ok_or_else(|| {
            Error::invalid("fitted estimates", format!("no estimate for t={t}"))
        })?;
        Ok((est.a.clone(), est.b.clone()))
    }
}

/// Minimum-norm least squares `argmin_X ||phi X - y||_F`.
///
/// Square systems go through LU, overdetermined ones through the normal
/// equations (the hot path), and anything rank-deficient or underdetermined
/// falls back to an SVD, whose pseudo-inverse solution is the
/// minimum-Frobenius-norm minimizer.
pub(crate) fn solve_least_squares(phi: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = (phi.nrows(), phi.ncols());
    if m == n {
        if let Some(sol) = phi.clone().lu().solve(y) {
            return Ok(sol);
        }
    } else if m > n {
        let gram = phi.transpose() * phi;
        if let Some(chol) = gram.cholesky() {
            return Ok(chol.solve(&(phi.transpose() * y)));
        }
    }
    let svd = phi.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    let eps = (smax * 1e-13).max(1e-300);
    svd.solve(y, eps).map_err(|e| Error::LinearSolve(e.to_string()))
}

/// Per-step batch fit on deltas around a reference trajectory: for each
/// `t`, minimizes `sum_i ||A^T dx_t_i + B^T du_t_i - dx_{t+1}_i||^2` over
/// the `M` perturbed trajectories, taking the minimum-norm solution when
/// the system is underdetermined (always the case at `t = 0`, where all
/// state deltas vanish).
pub fn fit_on_trajectory(
    reference: &Trajectory,
    perturbed: &[Trajectory],
) -> Result<Vec<JacobianEstimate>> {
    if perturbed.is_empty() {
        return Err(Error::invalid("fit_on_trajectory", "need at least one perturbed trajectory"));
    }
    let t_end = reference.horizon();
    let d = reference.states[0].len();
    let k = reference.actions.ncols();
    for (i, tr) in perturbed.iter().enumerate() {
        if tr.horizon() != t_end || tr.states[0].len() != d || tr.actions.ncols() != k {
            return Err(Error::dims(format!("perturbed trajectory {i} has mismatched shape")));
        }
    }
    let m = perturbed.len();
    let mut out = Vec::with_capacity(t_end);
    let mut phi = DMatrix::zeros(m, d + k);
    let mut y = DMatrix::zeros(m, d);
    for t in 0..t_end {
        for (i, tr) in perturbed.iter().enumerate() {
            for j in 0..d {
                phi[(i, j)] = tr.states[t][j] - reference.states[t][j];
                y[(i, j)] = tr.states[t + 1][j] - reference.states[t + 1][j];
            }
            for j in 0..k {
                phi[(i, d + j)] = tr.actions[(t, j)] - reference.actions[(t, j)];
            }
        }
        let x = solve_least_squares(&phi, &y)?;
        out.push(JacobianEstimate {
            a: x.rows(0, d).into_owned(),
            b: x.rows(d, k).into_owned(),
            c: None,
            t,
        });
    }
    Ok(out)
}

/// A raw `(x, u, x')` training triple.
#[derive(Debug, Clone)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

/// Per-step affine regression in absolute coordinates: fits
/// `x' ~ A^T x + B^T u + c` for each `t` over that step's transitions,
/// minimum-norm in `(A, B)` when underdetermined.
///
/// Solved in mean-centered coordinates with the intercept recovered
/// afterwards; identical to the raw regression where it is determined, but
/// immune to the severe ill-conditioning of mixing O(1) state columns with
/// intercepts when samples barely spread.
pub fn fit_on_trajectory_affine(transitions: &[Vec<Transition>]) -> Result<Vec<JacobianEstimate>> {
    let first = transitions
        .first()
        .and_then(|v| v.first())
        .ok_or_else(|| Error::invalid("fit_on_trajectory_affine", "need at least one transition"))?;
    let d = first.x.len();
    let k = first.u.len();
    let mut out = Vec::with_capacity(transitions.len());
    for (t, batch) in transitions.iter().enumerate() {
        if batch.is_empty() {
            return Err(Error::invalid("fit_on_trajectory_affine", format!("no samples at t={t}")));
        }
        let m = batch.len();
        let mut phi = DMatrix::zeros(m, d + k);
        let mut y = DMatrix::zeros(m, d);
        for (i, tr) in batch.iter().enumerate() {
            if tr.x.len() != d || tr.u.len() != k || tr.x_next.len() != d {
                return Err(Error::dims(format!("transition {i} at t={t} has mismatched shape")));
            }
            for j in 0..d {
                phi[(i, j)] = tr.x[j];
                y[(i, j)] = tr.x_next[j];
            }
            for j in 0..k {
                phi[(i, d + j)] = tr.u[j];
            }
        }
        let phi_mean = DVector::from_fn(d + k, |j, _| phi.column(j).sum() / m as f64);
        let y_mean = DVector::from_fn(d, |j, _| y.column(j).sum() / m as f64);
        for i in 0..m {
            for j in 0..d + k {
                phi[(i, j)] -= phi_mean[j];
            }
            for j in 0..d {
                y[(i, j)] -= y_mean[j];
            }
        }
        let x = solve_least_squares(&phi, &y)?;
        // c = mean(x') - A^T mean(x) - B^T mean(u)
        let c = &y_mean - x.transpose() * &phi_mean;
        out.push(JacobianEstimate {
            a: x.rows(0, d).into_owned(),
            b: x.rows(d, k).into_owned(),
            c: Some(c),
            t,
        });
    }
    Ok(out)
}

/// Recursive least-squares state: one affine coefficient matrix
/// `F_t = [A_t^T B_t^T c_t]` (`D x (D+K+1)`) and one precision matrix
/// `Q_t` per step, shared forgetting factor `alpha` and prior weight `q0`.
///
/// The update injects `(1 - alpha) q0 I` alongside each rank-one term, so
/// `Q_t` never loses its prior floor: `lambda_min(Q_t) >= q0` always.
#[derive(Debug, Clone)]
pub struct RlsState {
    f: Vec<DMatrix<f64>>,
    q: Vec<DMatrix<f64>>,
    alpha: f64,
    q0: f64,
    d: usize,
    k: usize,
}

impl RlsState {
    pub fn new(d: usize, k: usize, horizon: usize, alpha: f64, q0: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::invalid("RlsState", format!("alpha must lie in (0,1], got {alpha}")));
        }
        if !(q0 > 0.0) {
            return Err(Error::invalid("RlsState", format!("q0 must be > 0, got {q0}")));
        }
        let n = d + k + 1;
        Ok(RlsState {
            f: vec![DMatrix::zeros(d, n); horizon],
            q: vec![DMatrix::identity(n, n) * q0; horizon],
            alpha,
            q0,
            d,
            k,
        })
    }

    pub fn horizon(&self) -> usize {
        self.f.len()
    }

    /// Current estimate at step `t`.
    pub fn estimate(&self, t: usize) -> JacobianEstimate {
        let f = &self.f[t];
        JacobianEstimate {
            a: f.columns(0, self.d).transpose(),
            b: f.columns(self.d, self.k).transpose(),
            c: Some(f.column(self.d + self.k).into_owned()),
            t,
        }
    }

    /// Precision matrix at step `t` (read-only view for diagnostics).
    pub fn precision(&self, t: usize) -> &DMatrix<f64> {
        &self.q[t]
    }
}

/// One recursive update at step `t` from regressor `z = (x_t, u_t, 1)` and
/// observed successor `x_next`:
/// `Q_t <- alpha Q_t + (1 - alpha) q0 I + z z^T`, then
/// `F_t <- F_t + (x_next - F_t z) (Q_t^{-1} z)^T`.
pub fn rls_update(state: &mut RlsState, t: usize, z: &DVector<f64>, x_next: &DVector<f64>) -> Result<()> {
    let n = state.d + state.k + 1;
    if t >= state.f.len() {
        return Err(Error::invalid("rls_update", format!("t={t} out of range")));
    }
    if z.len() != n || x_next.len() != state.d {
        return Err(Error::dims(format!(
            "z has length {}, x_next {}, expected {n} and {}",
            z.len(),
            x_next.len(),
            state.d
        )));
    }
    if z[n - 1] != 1.0 {
        return Err(Error::invalid("rls_update", "regressor must end with the constant 1"));
    }

    let q = &mut state.q[t];
    *q *= state.alpha;
    let floor = (1.0 - state.alpha) * state.q0;
    for i in 0..n {
        q[(i, i)] += floor;
    }
    // rank-one data term
    q.ger(1.0, z, z, 1.0);

    let chol = q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::LinearSolve("RLS precision matrix lost positive definiteness".into()))?;
    let gain = chol.solve(z);
    let residual = x_next - &state.f[t] * z;
    state.f[t].ger(1.0, &residual, &gain, 1.0);
    Ok(())
}

/// Provider that folds each queried transition into the RLS state before
/// returning the refreshed estimate, so a backward sweep over a fresh
/// rollout both learns from and uses that rollout.
pub struct RlsProvider<'a> {
    state: &'a mut RlsState,
}

impl<'a> RlsProvider<'a> {
    pub fn new(state: &'a mut RlsState) -> Self {
        RlsProvider { state }
    }
}

impl JacobianProvider for RlsProvider<'_> {
    fn jacobians(&mut self, t: usize, traj: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let d = self.state.d;
        let k = self.state.k;
        let mut z = DVector::zeros(d + k + 1);
        z.rows_mut(0, d).copy_from(&traj.states[t]);
        z.rows_mut(d, k).copy_from(&traj.action(t));
        z[d + k] = 1.0;
        rls_update(self.state, t, &z, &traj.states[t + 1])?;
        let est = self.state.estimate(t);
        Ok((est.a, est.b))
    }
}
