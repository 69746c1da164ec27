//! Environment contract and rollouts.
//!
//! Environments are deterministic: a step function, a running reward and a
//! terminal reward, all pure, with reward gradients available in closed
//! form. Dynamics Jacobians are deliberately *not* part of the contract;
//! estimating them is the whole game and lives in [`crate::jacobians`].

mod linear;
mod lqr;
pub mod pendulum;

pub use linear::LinearEnv;
pub use lqr::LqrEnv;
pub use pendulum::{PendulumEnv, PendulumParams};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Static description of an environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
    pub x0: DVector<f64>,
}

impl EnvSpec {
    pub fn new(state_dim: usize, action_dim: usize, horizon: usize, x0: DVector<f64>) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || horizon == 0 {
            return Err(Error::invalid(
                "EnvSpec",
                format!("state_dim, action_dim, horizon must all be >= 1 (got {state_dim}, {action_dim}, {horizon})"),
            ));
        }
        if x0.len() != state_dim {
            return Err(Error::dims(format!(
                "x0 has length {}, expected state_dim {}",
                x0.len(),
                state_dim
            )));
        }
        Ok(EnvSpec { state_dim, action_dim, horizon, x0 })
    }
}

/// Sequence of actions `u_0..u_{T-1}` stored as a `T x K` matrix
/// (row `t` is the action applied at step `t`).
pub type ActionSequence = DMatrix<f64>;

/// Deterministic environment with known, differentiable rewards.
///
/// All methods must be pure functions of their arguments.
pub trait Environment: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    /// Dynamics `x_{t+1} = f(x_t, u_t)`.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// Running reward `r(x_t, u_t)`.
    fn reward(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    /// Terminal reward `r_T(x_T)`.
    fn terminal_reward(&self, x: &DVector<f64>) -> f64;

    /// `d r / d x`, length `D`.
    fn reward_grad_x(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `d r / d u`, length `K`.
    fn reward_grad_u(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `d r_T / d x`, length `D`.
    fn terminal_reward_grad(&self, x: &DVector<f64>) -> DVector<f64>;
}

/// Atomic tally of true-environment rollouts for one run.
///
/// Interaction cost is the x-axis of every learning curve, so each rollout
/// increments exactly once, including rollouts that later diverge.
#[derive(Debug, Default)]
pub struct RolloutCounter(AtomicU64);

impl RolloutCounter {
    pub fn new() -> Self {
        RolloutCounter(AtomicU64::new(0))
    }

    pub fn count(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    fn add_one(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
}

/// One executed episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `x_0..x_T`, length `T + 1`.
    pub states: Vec<DVector<f64>>,
    /// Copy of the executed action sequence, `T x K`.
    pub actions: ActionSequence,
    /// Running rewards `r(x_t, u_t)`, length `T`.
    pub rewards: Vec<f64>,
    pub terminal_reward: f64,
    /// Total return: running rewards summed in time order, then the
    /// terminal reward.
    pub return_j: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    /// Action at step `t` as a column vector.
    pub fn action(&self, t: usize) -> DVector<f64> {
        self.actions.row(t).transpose()
    }
}

/// Executes `actions` from the environment's initial state.
///
/// Increments `counter` once per call. A non-finite state or reward aborts
/// with [`Error::DivergedRollout`] carrying the step index (the terminal
/// reward reports index `T`).
pub fn rollout(
    env: &dyn Environment,
    actions: &ActionSequence,
    counter: &RolloutCounter,
) -> Result<Trajectory> {
    let spec = env.spec();
    if actions.nrows() != spec.horizon || actions.ncols() != spec.action_dim {
        return Err(Error::dims(format!(
            "action sequence is {}x{}, environment expects {}x{}",
            actions.nrows(),
            actions.ncols(),
            spec.horizon,
            spec.action_dim
        )));
    }
    counter.add_one();

    let t_end = spec.horizon;
    let mut states = Vec::with_capacity(t_end + 1);
    let mut rewards = Vec::with_capacity(t_end);
    let mut x = spec.x0.clone();
    let mut sum = 0.0;
    for t in 0..t_end {
        let u = actions.row(t).transpose();
        let r = env.reward(&x, &u);
        if !r.is_finite() {
            return Err(Error::DivergedRollout { step: t });
        }
        let next = env.step(&x, &u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedRollout { step: t });
        }
        states.push(x);
        rewards.push(r);
        sum += r;
        x = next;
    }
    let terminal_reward = env.terminal_reward(&x);
    if !terminal_reward.is_finite() {
        return Err(Error::DivergedRollout { step: t_end });
    }
    states.push(x);
    let return_j = sum + terminal_reward;
    Ok(Trajectory { states, actions: actions.clone(), rewards, terminal_reward, return_j })
}

/// Environment with the running reward folded into an extra state
/// dimension.
///
/// The wrapped environment has state `(x, rho)` with
/// `rho_{t+1} = rho_t + r(x_t, u_t)`, identically zero running reward, and
/// terminal reward `r_T(x) + rho`. Total returns match the original
/// environment exactly for every action sequence because the accumulator
/// adds rewards in the same order the plain rollout does.
pub struct AugmentedEnv {
    inner: Arc<dyn Environment>,
    spec: EnvSpec,
}

/// Wraps `env` so that all reward signal arrives through the terminal
/// reward. See [`AugmentedEnv`].
pub fn augment_terminal_reward(env: Arc<dyn Environment>) -> AugmentedEnv {
    let inner_spec = env.spec().clone();
    let mut x0 = DVector::zeros(inner_spec.state_dim + 1);
    x0.rows_mut(0, inner_spec.state_dim).copy_from(&inner_spec.x0);
    let spec = EnvSpec {
        state_dim: inner_spec.state_dim + 1,
        action_dim: inner_spec.action_dim,
        horizon: inner_spec.horizon,
        x0,
    };
    AugmentedEnv { inner: env, spec }
}

impl AugmentedEnv {
    fn split<'a>(&self, x: &'a DVector<f64>) -> (DVector<f64>, f64) {
        let d = self.spec.state_dim - 1;
        (x.rows(0, d).into_owned(), x[d])
    }
}

impl Environment for AugmentedEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let d = self.spec.state_dim - 1;
        let (core, rho) = self.split(x);
        let next = self.inner.step(&core, u);
        let mut out = DVector::zeros(d + 1);
        out.rows_mut(0, d).copy_from(&next);
        out[d] = rho + self.inner.reward(&core, u);
        out
    }

    fn reward(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        0.0
    }

    fn terminal_reward(&self, x: &DVector<f64>) -> f64 {
        let (core, rho) = self.split(x);
        self.inner.terminal_reward(&core) + rho
    }

    fn reward_grad_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.spec.state_dim)
    }

    fn reward_grad_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.spec.action_dim)
    }

    fn terminal_reward_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.spec.state_dim - 1;
        let (core, _) = self.split(x);
        let inner_grad = self.inner.terminal_reward_grad(&core);
        let mut out = DVector::zeros(d + 1);
        out.rows_mut(0, d).copy_from(&inner_grad);
        out[d] = 1.0;
        out
    }
}
