//! Costate backward sweep: the shared core of every gradient learner here.
//!
//! Given a rolled-out trajectory and per-step dynamics Jacobians from any
//! [`JacobianProvider`], the sweep computes costates
//! `lambda_t = grad_x r(x_t, u_t) + A_t lambda_{t+1}` backwards from
//! `lambda_T = grad r_T(x_T)` and assembles the per-action gradients
//! `g_t = grad_u r(x_t, u_t) + B_t lambda_{t+1}`. With exact Jacobians the
//! result is the exact gradient of the return with respect to every action;
//! with estimates it is the ascent direction whose quality the
//! [`crate::theory`] module quantifies.
//!
//! Jacobians use gradient layout throughout: `(grad_y f)_{i,j} = d f_j / d y_i`,
//! so `A_t` is `D x D`, `B_t` is `K x D`, and both act on costates by plain
//! matrix-vector products.

use nalgebra::{DMatrix, DVector};

use crate::env::{rollout, ActionSequence, Environment, RolloutCounter, Trajectory};
use crate::jacobians::OracleProvider;
use crate::{Error, Result};

/// Costates `lambda_1..lambda_T` as a `T x D` matrix; row `t` stores
/// `lambda_{t+1}` (the vector that multiplies the step-`t` Jacobians).
#[derive(Debug, Clone)]
pub struct Costates {
    pub lambda: DMatrix<f64>,
}

impl Costates {
    /// `lambda_{t+1}` as a column vector, `t` in `0..T`.
    pub fn after_step(&self, t: usize) -> DVector<f64> {
        self.lambda.row(t).transpose()
    }
}

/// Per-action gradient estimates, `T x K` with row `t` for `u_t`.
#[derive(Debug, Clone)]
pub struct GradientSequence {
    pub g: DMatrix<f64>,
}

impl GradientSequence {
    pub fn row(&self, t: usize) -> DVector<f64> {
        self.g.row(t).transpose()
    }

    /// Frobenius norm of the whole sequence.
    pub fn norm(&self) -> f64 {
        self.g.norm()
    }
}

/// Source of dynamics Jacobians `(A_t, B_t)` in gradient layout.
///
/// `&mut self` because some providers update internal state as they are
/// queried (the recursive least-squares estimator folds in the transition
/// it is being asked about).
pub trait JacobianProvider {
    fn jacobians(&mut self, t: usize, traj: &Trajectory) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

/// Backward sweep over `traj`.
///
/// The provider is queried exactly once per step, in order `t = T-1 .. 0`.
/// Returns the costates `lambda_1..lambda_T` and the gradient sequence.
pub fn backward_pass(
    traj: &Trajectory,
    provider: &mut dyn JacobianProvider,
    env: &dyn Environment,
) -> Result<(Costates, GradientSequence)> {
    let spec = env.spec();
    let (d, k) = (spec.state_dim, spec.action_dim);
    let t_end = traj.horizon();
    let mut lambda = DMatrix::zeros(t_end, d);
    let mut g = DMatrix::zeros(t_end, k);

    // lambda_hold tracks lambda_{t+1} while walking t downward.
    let mut lambda_hold = env.terminal_reward_grad(&traj.states[t_end]);
    for t in (0..t_end).rev() {
        let x = &traj.states[t];
        let u = traj.action(t);
        let (a_t, b_t) = provider
            .jacobians(t, traj)
            .map_err(|e| Error::Provider { t, source: Box::new(e) })?;
        if a_t.nrows() != d || a_t.ncols() != d || b_t.nrows() != k || b_t.ncols() != d {
            return Err(Error::dims(format!(
                "provider returned {}x{} and {}x{} at t={t}, expected {d}x{d} and {k}x{d}",
                a_t.nrows(),
                a_t.ncols(),
                b_t.nrows(),
                b_t.ncols()
            )));
        }
        lambda.row_mut(t).copy_from(&lambda_hold.transpose());

        let g_t = env.reward_grad_u(x, &u) + &b_t * &lambda_hold;
        if g_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { t });
        }
        g.row_mut(t).copy_from(&g_t.transpose());

        if t > 0 {
            lambda_hold = env.reward_grad_x(x, &u) + &a_t * &lambda_hold;
            if lambda_hold.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteCostate { t });
            }
        }
    }
    Ok((Costates { lambda }, GradientSequence { g }))
}

/// Exact return gradient: one rollout plus a backward sweep with the
/// finite-difference probe provider. The rollout increments `counter`; the
/// probes are plain dynamics evaluations and are not counted.
pub fn true_gradient(
    env: &dyn Environment,
    actions: &ActionSequence,
    counter: &RolloutCounter,
) -> Result<GradientSequence> {
    let traj = rollout(env, actions, counter)?;
    let mut provider = OracleProvider::new(env);
    let (_, g) = backward_pass(&traj, &mut provider, env)?;
    Ok(g)
}
