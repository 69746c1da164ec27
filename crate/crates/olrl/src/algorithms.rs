//! End-to-end optimizers over open-loop action sequences.
//!
//! Every run produces a [`LearningCurve`]: the return of the mean
//! (unperturbed) action sequence over iterations, against the cumulative
//! number of true-environment rollouts spent to get there. The rollout
//! column is the honest cost axis. Probe evaluations of the dynamics made
//! by the finite-difference Jacobian oracle are not rollouts, imagined
//! rollouts through a model are not rollouts, and evaluations that exist
//! only to record the curve are counted but flagged.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{rollout, ActionSequence, Environment, RolloutCounter, Trajectory};
use crate::error::{Error, Result};
use crate::jacobians::{
    fit_on_trajectory, solve_least_squares, FittedProvider, ModelProvider, OracleProvider,
    RlsProvider, RlsState,
};
use crate::models::{white_noise_perturb, DifferentiableModel};
use crate::optim::{apply_update, OptimizerKind, OptimizerState};
use crate::pontryagin::{backward_pass, GradientSequence};

/// Iteration stride at which algorithms that never roll out their mean
/// sequence as part of the work (off-trajectory, CEM) insert an extra
/// evaluation rollout of the mean.
pub const MEAN_EVAL_STRIDE: usize = 50;

/// Optimizer identifiers accepted by [`RunConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    /// Gradient ascent with exact Jacobians from finite-difference probes
    /// of the true dynamics.
    Oracle,
    /// Gradient ascent with Jacobians evaluated by a model along true
    /// trajectories.
    ModelBased,
    /// Gradient ascent along trajectories imagined by a model; the true
    /// environment is only touched to record the curve.
    Planner,
    /// Jacobians regressed from perturbed rollouts around the current
    /// sequence, refitted from scratch every iteration.
    OnTrajectory,
    /// Jacobians maintained across iterations by recursive least squares
    /// with a forgetting factor, fed by one perturbed rollout per iteration.
    OffTrajectory,
    /// Zeroth-order baseline: the return gradient itself is regressed from
    /// return differences of perturbed rollouts.
    FiniteDifference,
    /// Cross-entropy baseline: elite average of sampled sequences, noise
    /// scale held fixed.
    Cem,
}

impl Algorithm {
    pub fn id(&self) -> &'static str {
        match self {
            Algorithm::Oracle => "oracle",
            Algorithm::ModelBased => "model_based",
            Algorithm::Planner => "planner",
            Algorithm::OnTrajectory => "on_trajectory",
            Algorithm::OffTrajectory => "off_trajectory",
            Algorithm::FiniteDifference => "finite_difference",
            Algorithm::Cem => "cem",
        }
    }

    pub fn from_id(id: &str) -> Result<Algorithm> {
        Ok(match id {
            "oracle" => Algorithm::Oracle,
            "model_based" => Algorithm::ModelBased,
            "planner" => Algorithm::Planner,
            "on_trajectory" => Algorithm::OnTrajectory,
            "off_trajectory" => Algorithm::OffTrajectory,
            "finite_difference" => Algorithm::FiniteDifference,
            "cem" => Algorithm::Cem,
            other => {
                return Err(Error::invalid(
                    "algorithm",
                    format!("unknown algorithm {other:?}"),
                ))
            }
        })
    }

    /// Whether the run functions need a dynamics model.
    pub fn needs_model(&self) -> bool {
        matches!(self, Algorithm::ModelBased | Algorithm::Planner)
    }
}

/// Complete description of one optimization run.
///
/// `env`, `horizon`, `model` and `model_scale` describe how the experiment
/// harness should construct the environment and model; the `run_*` functions
/// themselves receive both as arguments and do not read those fields.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Environment identifier, `"pendulum"` in every stock experiment.
    pub env: String,
    /// Episode length `T`.
    pub horizon: usize,
    pub algorithm: Algorithm,
    /// Number of optimization steps `N`.
    pub steps: usize,
    /// Step size.
    pub eta: f64,
    /// Perturbation scale for sampled action sequences.
    pub sigma: f64,
    /// Perturbed rollouts per iteration `M` (on-trajectory,
    /// finite-difference and CEM runs).
    pub samples: usize,
    /// Forgetting factor for off-trajectory recursive least squares.
    pub alpha: f64,
    /// Prior precision injected by the off-trajectory update.
    pub q0: f64,
    /// CEM elite count `L`; `None` picks `max(1, ceil(M/10))`.
    pub elite: Option<usize>,
    /// Forces exact finite-difference Jacobians in model-based runs.
    pub oracle: bool,
    pub seed: u64,
    /// Standard deviation of the Gaussian initial action sequence.
    pub init_std: f64,
    /// Model misspecification scale for perturbed-parameter models.
    pub model_scale: f64,
    /// Model identifier for harness-constructed models: `"exact"` or
    /// `"mlp"`.
    pub model: String,
    pub optimizer: OptimizerKind,
}

impl Default for RunConfig {
    /// The stock cart-pole swing-up configuration.
    fn default() -> Self {
        RunConfig {
            env: "pendulum".to_owned(),
            horizon: 100,
            algorithm: Algorithm::Oracle,
            steps: 50_000,
            eta: 0.001,
            sigma: 0.001,
            samples: 10,
            alpha: 0.8,
            q0: 0.001,
            elite: None,
            oracle: false,
            seed: 0,
            init_std: 0.01,
            model_scale: 0.0,
            model: "exact".to_owned(),
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl RunConfig {
    /// Field-level checks shared by every algorithm.
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("run config", "horizon must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::invalid("run config", "eta must be positive"));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::invalid("run config", "sigma must be nonnegative"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("run config", "alpha must lie in (0,1]"));
        }
        if !(self.q0.is_finite() && self.q0 > 0.0) {
            return Err(Error::invalid("run config", "q0 must be positive"));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::invalid("run config", "init_std must be nonnegative"));
        }
        if !(self.model_scale.is_finite() && self.model_scale >= 0.0) {
            return Err(Error::invalid("run config", "s must be nonnegative"));
        }
        if let Some(l) = self.elite {
            if l == 0 || l > self.samples {
                return Err(Error::invalid("run config", "L must lie in [1, M]"));
            }
        }
        Ok(())
    }

    /// CEM elite count, defaulting to a tenth of the population.
    pub fn effective_elite(&self) -> usize {
        self.elite.unwrap_or_else(|| (self.samples.div_ceil(10)).max(1))
    }
}

/// Selects the optional diagnostics attached to curve records.
///
/// Only algorithms that compute a gradient at every recorded iterate
/// (oracle, model-based, planner, on-trajectory, finite-difference) honor
/// these flags; off-trajectory and CEM records never carry diagnostics.
#[derive(Clone, Copy, Debug, Default)]
pub struct RecordSpec {
    /// Store the per-step two-norms of the update gradient.
    pub grad_norms: bool,
    /// Additionally run an exact backward pass at each recorded iterate and
    /// store its per-step norms. The probes touch the dynamics directly and
    /// do not count as rollouts.
    pub oracle: bool,
    /// Store full gradient sequences instead of just norms.
    pub gradients: bool,
    /// Store a copy of the evaluated action sequence.
    pub actions: bool,
}

/// One recorded evaluation of the mean action sequence.
#[derive(Clone, Debug)]
pub struct CurveRecord {
    /// Iteration index `k` of the evaluated iterate.
    pub iteration: usize,
    /// Cumulative true-environment rollouts immediately after the rollout
    /// that produced `j`.
    pub rollouts: u64,
    /// Return of the mean sequence at this iterate.
    pub j: f64,
    /// True when the rollout existed only to record the curve and did no
    /// optimization work.
    pub evaluation_only: bool,
    pub grad_norms: Option<Vec<f64>>,
    pub oracle_grad_norms: Option<Vec<f64>>,
    pub gradient: Option<GradientSequence>,
    pub oracle_gradient: Option<GradientSequence>,
    pub actions: Option<ActionSequence>,
}

/// Returns of the mean sequence against cumulative interaction cost.
#[derive(Clone, Debug)]
pub struct LearningCurve {
    pub records: Vec<CurveRecord>,
    /// Running maximum of every recorded `j`.
    pub j_max: f64,
    /// Final rollout-counter value, evaluation rollouts included.
    pub total_rollouts: u64,
    /// How many of `total_rollouts` were flagged evaluation-only.
    pub evaluation_rollouts: u64,
}

impl LearningCurve {
    fn new() -> Self {
        LearningCurve {
            records: Vec::new(),
            j_max: f64::NEG_INFINITY,
            total_rollouts: 0,
            evaluation_rollouts: 0,
        }
    }

    fn push(&mut self, record: CurveRecord) {
        assert!(
            self.records.last().is_none_or(|last| last.rollouts < record.rollouts),
            "rollout counts must be strictly increasing across records"
        );
        if record.evaluation_only {
            self.evaluation_rollouts += 1;
        }
        self.j_max = self.j_max.max(record.j);
        self.records.push(record);
    }

    /// Return of the first recorded iterate.
    pub fn j_initial(&self) -> Option<f64> {
        self.records.first().map(|r| r.j)
    }

    /// Cumulative rollout count at the first record whose return exceeds
    /// `threshold`, if any does.
    pub fn rollouts_to_reach(&self, threshold: f64) -> Option<u64> {
        self.records.iter().find(|r| r.j > threshold).map(|r| r.rollouts)
    }
}

/// A finished (or aborted) run.
#[derive(Debug)]
pub struct RunOutcome {
    pub curve: LearningCurve,
    /// The mean sequence after the last completed update.
    pub final_actions: ActionSequence,
    /// Per-step regression state of an off-trajectory run.
    pub rls: Option<RlsState>,
    /// Set when a numeric failure aborted the run; the curve then holds
    /// every record completed before the failure.
    pub error: Option<Error>,
}

impl RunOutcome {
    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }
}

/// Zero-mean Gaussian starting sequence, drawn row by row so the stream
/// position of each entry is fixed by `(t, dim)`.
fn initial_actions(
    horizon: usize,
    action_dim: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> ActionSequence {
    let mut u = DMatrix::zeros(horizon, action_dim);
    for t in 0..horizon {
        for j in 0..action_dim {
            let z: f64 = StandardNormal.sample(rng);
            u[(t, j)] = std * z;
        }
    }
    u
}

fn row_norms(g: &GradientSequence) -> Vec<f64> {
    (0..g.g.nrows()).map(|t| g.g.row(t).norm()).collect()
}

/// Shared mutable state of one run.
struct RunState<'e> {
    env: &'e dyn Environment,
    cfg: RunConfig,
    record: RecordSpec,
    counter: RolloutCounter,
    actions: ActionSequence,
    opt: OptimizerState,
    curve: LearningCurve,
    rng: ChaCha8Rng,
}

impl<'e> RunState<'e> {
    fn new(cfg: &RunConfig, env: &'e dyn Environment, record: RecordSpec) -> Result<Self> {
        cfg.validate()?;
        let spec = env.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actions = initial_actions(spec.horizon, spec.action_dim, cfg.init_std, &mut rng);
        let opt = OptimizerState::new(cfg.optimizer, cfg.eta, spec.horizon, spec.action_dim)?;
        Ok(RunState {
            env,
            cfg: cfg.clone(),
            record,
            counter: RolloutCounter::new(),
            actions,
            opt,
            curve: LearningCurve::new(),
            rng,
        })
    }

    /// Rolls out the current mean sequence and records the result.
    fn evaluate(&mut self, iteration: usize, evaluation_only: bool) -> Result<Trajectory> {
        let traj = rollout(self.env, &self.actions, &self.counter)?;
        self.curve.push(CurveRecord {
            iteration,
            rollouts: self.counter.count(),
            j: traj.return_j,
            evaluation_only,
            grad_norms: None,
            oracle_grad_norms: None,
            gradient: None,
            oracle_gradient: None,
            actions: self.record.actions.then(|| self.actions.clone()),
        });
        Ok(traj)
    }

    /// Attaches gradient diagnostics to the most recent record. `traj` is
    /// the trajectory at which an exact reference gradient makes sense.
    fn attach_gradients(&mut self, traj: &Trajectory, g: &GradientSequence) -> Result<()> {
        if !(self.record.grad_norms || self.record.oracle || self.record.gradients) {
            return Ok(());
        }
        let oracle = if self.record.oracle {
            let mut provider = OracleProvider::new(self.env);
            Some(backward_pass(traj, &mut provider, self.env)?.1)
        } else {
            None
        };
        let rec = self
            .curve
            .records
            .last_mut()
            .expect("gradients are attached to an existing record");
        if self.record.grad_norms {
            rec.grad_norms = Some(row_norms(g));
        }
        if self.record.gradients {
            rec.gradient = Some(g.clone());
        }
        if let Some(og) = oracle {
            rec.oracle_grad_norms = Some(row_norms(&og));
            if self.record.gradients {
                rec.oracle_gradient = Some(og);
            }
        }
        Ok(())
    }

    /// Draws `u ~ N(mean, sigma^2 I)` around the current sequence.
    fn perturb(&mut self) -> Result<ActionSequence> {
        white_noise_perturb(&self.actions, self.cfg.sigma, &mut self.rng)
    }

    /// Checks that the loop spent exactly `work_per_iteration` counted
    /// rollouts per iteration on top of the flagged evaluations.
    fn assert_accounting(&self, work_per_iteration: u64) {
        let expected =
            work_per_iteration * self.cfg.steps as u64 + self.curve.evaluation_rollouts;
        assert_eq!(
            self.counter.count(),
            expected,
            "rollout accounting violated: counted {} rollouts, expected {}",
            self.counter.count(),
            expected
        );
    }

    fn finish(mut self, error: Option<Error>) -> RunOutcome {
        self.curve.total_rollouts = self.counter.count();
        RunOutcome {
            curve: self.curve,
            final_actions: self.actions,
            rls: None,
            error,
        }
    }
}

fn require(condition: bool, why: &str) -> Result<()> {
    if condition {
        Ok(())
    } else {
        Err(Error::invalid("run config", why))
    }
}

fn perturbation_preconditions(cfg: &RunConfig) -> Result<()> {
    require(cfg.samples >= 1, "M must be at least 1")?;
    require(cfg.sigma > 0.0, "sigma must be positive for perturbation-based runs")
}

fn off_trajectory_preconditions(cfg: &RunConfig) -> Result<()> {
    require(cfg.alpha < 1.0, "alpha must lie in (0,1) for off-trajectory runs")?;
    require(cfg.sigma > 0.0, "sigma must be positive for off-trajectory runs")
}

fn cem_preconditions(cfg: &RunConfig) -> Result<()> {
    require(cfg.samples >= 1, "M must be at least 1")?;
    let elite = cfg.effective_elite();
    require(elite >= 1 && elite <= cfg.samples, "L must lie in [1, M]")
}

/// Every validation a run of `cfg.algorithm` will perform, without running
/// anything: field-level checks plus the algorithm's own preconditions.
pub fn preflight(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    match cfg.algorithm {
        Algorithm::OnTrajectory | Algorithm::FiniteDifference => {
            perturbation_preconditions(cfg)
        }
        Algorithm::OffTrajectory => off_trajectory_preconditions(cfg),
        Algorithm::Cem => cem_preconditions(cfg),
        Algorithm::Oracle | Algorithm::ModelBased | Algorithm::Planner => Ok(()),
    }
}

fn check_model_dims(env: &dyn Environment, model: &dyn DifferentiableModel) -> Result<()> {
    let spec = env.spec();
    let (d, k) = model.dims();
    if (d, k) != (spec.state_dim, spec.action_dim) {
        return Err(Error::dims(format!(
            "model is {d}x{k}, environment expects {}x{}",
            spec.state_dim, spec.action_dim
        )));
    }
    Ok(())
}

/// Rolls `actions` through `model` from the environment's initial state,
/// scoring with the environment's reward functions. Mirrors
/// [`crate::env::rollout`] arithmetic exactly so that a model matching the
/// true dynamics reproduces true rollouts bit for bit; does not touch any
/// rollout counter.
pub fn imagined_rollout(
    model: &dyn DifferentiableModel,
    env: &dyn Environment,
    actions: &ActionSequence,
) -> Result<Trajectory> {
    check_model_dims(env, model)?;
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
        let next = model.predict(&x, &u);
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

/// Gradient ascent with exact finite-difference Jacobians.
pub fn run_oracle(cfg: &RunConfig, env: &dyn Environment) -> Result<RunOutcome> {
    run_oracle_with(cfg, env, RecordSpec::default())
}

pub fn run_oracle_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    record: RecordSpec,
) -> Result<RunOutcome> {
    let mut st = RunState::new(cfg, env, record)?;
    let error = gradient_loop(&mut st, None).err();
    if error.is_none() {
        st.assert_accounting(1);
    }
    Ok(st.finish(error))
}

/// Gradient ascent with model Jacobians evaluated along true trajectories.
pub fn run_model_based(
    cfg: &RunConfig,
    env: &dyn Environment,
    model: &dyn DifferentiableModel,
) -> Result<RunOutcome> {
    run_model_based_with(cfg, env, model, RecordSpec::default())
}

pub fn run_model_based_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    model: &dyn DifferentiableModel,
    record: RecordSpec,
) -> Result<RunOutcome> {
    check_model_dims(env, model)?;
    let mut st = RunState::new(cfg, env, record)?;
    let source = if cfg.oracle { None } else { Some(model) };
    let error = gradient_loop(&mut st, source).err();
    if error.is_none() {
        st.assert_accounting(1);
    }
    Ok(st.finish(error))
}

/// One true rollout per iteration; Jacobians from `model` when given,
/// otherwise from finite-difference probes of the true dynamics.
fn gradient_loop(st: &mut RunState<'_>, model: Option<&dyn DifferentiableModel>) -> Result<()> {
    for k in 0..st.cfg.steps {
        let traj = st.evaluate(k, false)?;
        let g = match model {
            Some(m) => {
                let mut provider = ModelProvider::new(m);
                backward_pass(&traj, &mut provider, st.env)?.1
            }
            None => {
                let mut provider = OracleProvider::new(st.env);
                backward_pass(&traj, &mut provider, st.env)?.1
            }
        };
        st.attach_gradients(&traj, &g)?;
        apply_update(&mut st.opt, &mut st.actions, &g)?;
    }
    st.evaluate(st.cfg.steps, true)?;
    Ok(())
}

/// Gradient ascent along model-imagined trajectories. The true environment
/// is rolled out once per iteration purely to record the curve.
pub fn run_planner(
    cfg: &RunConfig,
    env: &dyn Environment,
    model: &dyn DifferentiableModel,
) -> Result<RunOutcome> {
    run_planner_with(cfg, env, model, RecordSpec::default())
}

pub fn run_planner_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    model: &dyn DifferentiableModel,
    record: RecordSpec,
) -> Result<RunOutcome> {
    check_model_dims(env, model)?;
    let mut st = RunState::new(cfg, env, record)?;
    let error = planner_loop(&mut st, model).err();
    if error.is_none() {
        st.assert_accounting(0);
    }
    Ok(st.finish(error))
}

fn planner_loop(st: &mut RunState<'_>, model: &dyn DifferentiableModel) -> Result<()> {
    for k in 0..st.cfg.steps {
        let true_traj = st.evaluate(k, true)?;
        let imagined = imagined_rollout(model, st.env, &st.actions)?;
        let mut provider = ModelProvider::new(model);
        let g = backward_pass(&imagined, &mut provider, st.env)?.1;
        // The exact reference gradient lives at the true trajectory; the
        // update gradient lives at the imagined one.
        st.attach_gradients(&true_traj, &g)?;
        apply_update(&mut st.opt, &mut st.actions, &g)?;
    }
    st.evaluate(st.cfg.steps, true)?;
    Ok(())
}

/// Per-iteration Jacobian regression from perturbed rollouts around the
/// current sequence.
pub fn run_on_trajectory(cfg: &RunConfig, env: &dyn Environment) -> Result<RunOutcome> {
    run_on_trajectory_with(cfg, env, RecordSpec::default())
}

pub fn run_on_trajectory_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    record: RecordSpec,
) -> Result<RunOutcome> {
    perturbation_preconditions(cfg)?;
    let mut st = RunState::new(cfg, env, record)?;
    let error = on_trajectory_loop(&mut st).err();
    if error.is_none() {
        st.assert_accounting(cfg.samples as u64 + 1);
    }
    Ok(st.finish(error))
}

fn on_trajectory_loop(st: &mut RunState<'_>) -> Result<()> {
    for k in 0..st.cfg.steps {
        let reference = st.evaluate(k, false)?;
        let mut perturbed = Vec::with_capacity(st.cfg.samples);
        for _ in 0..st.cfg.samples {
            let u = st.perturb()?;
            perturbed.push(rollout(st.env, &u, &st.counter)?);
        }
        let estimates = fit_on_trajectory(&reference, &perturbed)?;
        let mut provider = FittedProvider::new(estimates);
        let g = backward_pass(&reference, &mut provider, st.env)?.1;
        st.attach_gradients(&reference, &g)?;
        apply_update(&mut st.opt, &mut st.actions, &g)?;
    }
    st.evaluate(st.cfg.steps, true)?;
    Ok(())
}

/// Recursive-least-squares Jacobians fed by a single perturbed rollout per
/// iteration; the ascent step is applied to the unperturbed mean sequence.
pub fn run_off_trajectory(cfg: &RunConfig, env: &dyn Environment) -> Result<RunOutcome> {
    run_off_trajectory_with(cfg, env, RecordSpec::default())
}

pub fn run_off_trajectory_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    record: RecordSpec,
) -> Result<RunOutcome> {
    off_trajectory_preconditions(cfg)?;
    let spec = env.spec();
    let mut rls = RlsState::new(spec.state_dim, spec.action_dim, spec.horizon, cfg.alpha, cfg.q0)?;
    let mut st = RunState::new(cfg, env, record)?;
    let error = off_trajectory_loop(&mut st, &mut rls).err();
    if error.is_none() {
        st.assert_accounting(1);
    }
    let mut outcome = st.finish(error);
    outcome.rls = Some(rls);
    Ok(outcome)
}

fn off_trajectory_loop(st: &mut RunState<'_>, rls: &mut RlsState) -> Result<()> {
    for k in 0..st.cfg.steps {
        if k % MEAN_EVAL_STRIDE == 0 {
            st.evaluate(k, true)?;
        }
        let perturbed_actions = st.perturb()?;
        let traj = rollout(st.env, &perturbed_actions, &st.counter)?;
        // The backward pass walks the perturbed trajectory: rewards and
        // their gradients are taken at the visited (x, u), while the
        // regression state absorbs the transitions one step at a time.
        let mut provider = RlsProvider::new(rls);
        let g = backward_pass(&traj, &mut provider, st.env)?.1;
        apply_update(&mut st.opt, &mut st.actions, &g)?;
    }
    st.evaluate(st.cfg.steps, true)?;
    Ok(())
}

/// Zeroth-order baseline: regresses the return gradient from return
/// differences of perturbed rollouts, minimum-norm when `M < T*K`.
pub fn run_finite_difference(cfg: &RunConfig, env: &dyn Environment) -> Result<RunOutcome> {
    run_finite_difference_with(cfg, env, RecordSpec::default())
}

pub fn run_finite_difference_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    record: RecordSpec,
) -> Result<RunOutcome> {
    perturbation_preconditions(cfg)?;
    let mut st = RunState::new(cfg, env, record)?;
    let error = finite_difference_loop(&mut st).err();
    if error.is_none() {
        st.assert_accounting(cfg.samples as u64 + 1);
    }
    Ok(st.finish(error))
}

fn finite_difference_loop(st: &mut RunState<'_>) -> Result<()> {
    let spec = st.env.spec();
    let (t_end, k_dim) = (spec.horizon, spec.action_dim);
    let flat = t_end * k_dim;
    for k in 0..st.cfg.steps {
        let reference = st.evaluate(k, false)?;
        let mut phi = DMatrix::zeros(st.cfg.samples, flat);
        let mut dj = DMatrix::zeros(st.cfg.samples, 1);
        for m in 0..st.cfg.samples {
            let u = st.perturb()?;
            let traj = rollout(st.env, &u, &st.counter)?;
            for t in 0..t_end {
                for j in 0..k_dim {
                    phi[(m, t * k_dim + j)] = u[(t, j)] - st.actions[(t, j)];
                }
            }
            dj[(m, 0)] = traj.return_j - reference.return_j;
        }
        let ghat = solve_least_squares(&phi, &dj)?;
        let g = GradientSequence {
            g: DMatrix::from_fn(t_end, k_dim, |t, j| ghat[(t * k_dim + j, 0)]),
        };
        st.attach_gradients(&reference, &g)?;
        apply_update(&mut st.opt, &mut st.actions, &g)?;
    }
    st.evaluate(st.cfg.steps, true)?;
    Ok(())
}

/// Cross-entropy baseline with a fixed noise scale.
pub fn run_cem(cfg: &RunConfig, env: &dyn Environment) -> Result<RunOutcome> {
    run_cem_with(cfg, env, RecordSpec::default())
}

pub fn run_cem_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    record: RecordSpec,
) -> Result<RunOutcome> {
    cem_preconditions(cfg)?;
    let elite = cfg.effective_elite();
    let mut st = RunState::new(cfg, env, record)?;
    let error = cem_loop(&mut st, elite).err();
    if error.is_none() {
        st.assert_accounting(cfg.samples as u64);
    }
    Ok(st.finish(error))
}

fn cem_loop(st: &mut RunState<'_>, elite: usize) -> Result<()> {
    for k in 0..st.cfg.steps {
        if k % MEAN_EVAL_STRIDE == 0 {
            st.evaluate(k, true)?;
        }
        let mut samples = Vec::with_capacity(st.cfg.samples);
        for _ in 0..st.cfg.samples {
            let u = st.perturb()?;
            let traj = rollout(st.env, &u, &st.counter)?;
            samples.push((traj.return_j, u));
        }
        // Stable sort: equal returns keep sampling order, so ties resolve
        // to the lower sample index.
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.sort_by(|&a, &b| samples[b].0.total_cmp(&samples[a].0));
        let mut mean = DMatrix::zeros(st.actions.nrows(), st.actions.ncols());
        for &i in order.iter().take(elite) {
            mean += &samples[i].1;
        }
        st.actions = mean / elite as f64;
    }
    st.evaluate(st.cfg.steps, true)?;
    Ok(())
}

/// Dispatches `cfg.algorithm`, passing `model` through to the algorithms
/// that consume one.
pub fn run_algorithm(
    cfg: &RunConfig,
    env: &dyn Environment,
    model: Option<&dyn DifferentiableModel>,
) -> Result<RunOutcome> {
    run_algorithm_with(cfg, env, model, RecordSpec::default())
}

pub fn run_algorithm_with(
    cfg: &RunConfig,
    env: &dyn Environment,
    model: Option<&dyn DifferentiableModel>,
    record: RecordSpec,
) -> Result<RunOutcome> {
    fn need(
        model: Option<&dyn DifferentiableModel>,
        alg: Algorithm,
    ) -> Result<&dyn DifferentiableModel> {
        model.ok_or_else(|| Error::invalid("model", format!("{} requires a model", alg.id())))
    }
    match cfg.algorithm {
        Algorithm::Oracle => run_oracle_with(cfg, env, record),
        Algorithm::ModelBased => {
            run_model_based_with(cfg, env, need(model, cfg.algorithm)?, record)
        }
        Algorithm::Planner => run_planner_with(cfg, env, need(model, cfg.algorithm)?, record),
        Algorithm::OnTrajectory => run_on_trajectory_with(cfg, env, record),
        Algorithm::OffTrajectory => run_off_trajectory_with(cfg, env, record),
        Algorithm::FiniteDifference => run_finite_difference_with(cfg, env, record),
        Algorithm::Cem => run_cem_with(cfg, env, record),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{LinearEnv, LqrEnv, PendulumEnv};
    use crate::models::{LinearModel, PendulumModel};
    use crate::pontryagin::true_gradient;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector, DVector};
    use rand::Rng;

    fn small_pendulum(horizon: usize) -> PendulumEnv {
        let params = PendulumEnv::default_task().params().clone();
        PendulumEnv::new(params, horizon).unwrap()
    }

    fn quadratic_linear_env(horizon: usize) -> LinearEnv {
        LinearEnv::new(
            dmatrix![0.9, 0.1; 0.0, 0.8],
            dmatrix![0.0; 1.0],
            dvector![1.0, -0.5],
            horizon,
        )
        .unwrap()
        .with_terminal_quadratic(dmatrix![1.0, 0.0; 0.0, 1.0])
        .unwrap()
    }

    fn base_cfg(algorithm: Algorithm, steps: usize) -> RunConfig {
        RunConfig {
            algorithm,
            steps,
            samples: 3,
            sigma: 1e-3,
            seed: 7,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_steps_leaves_only_the_initial_evaluation() {
        let env = small_pendulum(10);
        let out = run_oracle(&base_cfg(Algorithm::Oracle, 0), &env).unwrap();
        assert!(out.is_complete());
        assert_eq!(out.curve.records.len(), 1);
        let rec = &out.curve.records[0];
        assert_eq!(rec.iteration, 0);
        assert_eq!(rec.rollouts, 1);
        assert!(rec.evaluation_only);
        assert_eq!(out.curve.j_max, rec.j);
        assert_eq!(out.curve.total_rollouts, 1);
    }

    #[test]
    fn rollout_accounting_per_algorithm() {
        let env = quadratic_linear_env(6);
        let model = LinearModel::new(env.a().clone(), env.b().clone()).unwrap();
        let steps = 7;
        let m = 3;
        let mut cfg = base_cfg(Algorithm::Oracle, steps);
        cfg.samples = m;
        cfg.eta = 1e-3;

        let total = |out: &RunOutcome| out.curve.total_rollouts;

        let out = run_oracle(&cfg, &env).unwrap();
        assert_eq!(total(&out), steps as u64 + 1);
        assert_eq!(out.curve.evaluation_rollouts, 1);

        let out = run_model_based(&cfg, &env, &model).unwrap();
        assert_eq!(total(&out), steps as u64 + 1);

        let out = run_planner(&cfg, &env, &model).unwrap();
        assert_eq!(total(&out), steps as u64 + 1);
        assert_eq!(out.curve.evaluation_rollouts, steps as u64 + 1);
        assert!(out.curve.records.iter().all(|r| r.evaluation_only));

        let out = run_on_trajectory(&cfg, &env).unwrap();
        assert_eq!(total(&out), (steps * (m + 1)) as u64 + 1);

        let out = run_finite_difference(&cfg, &env).unwrap();
        assert_eq!(total(&out), (steps * (m + 1)) as u64 + 1);

        let mut off = cfg.clone();
        off.alpha = 0.9;
        let out = run_off_trajectory(&off, &env).unwrap();
        // One mean evaluation at k=0 plus the final one.
        assert_eq!(total(&out), steps as u64 + 2);
        assert_eq!(out.curve.evaluation_rollouts, 2);
        assert!(out.rls.is_some());

        let out = run_cem(&cfg, &env).unwrap();
        assert_eq!(total(&out), (steps * m) as u64 + 2);

        for out in [run_on_trajectory(&cfg, &env).unwrap()] {
            let rolls: Vec<u64> = out.curve.records.iter().map(|r| r.rollouts).collect();
            assert!(rolls.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let env = small_pendulum(20);
        let mut cfg = base_cfg(Algorithm::OnTrajectory, 30);
        cfg.eta = 0.01;
        let a = run_on_trajectory(&cfg, &env).unwrap();
        let b = run_on_trajectory(&cfg, &env).unwrap();
        assert_eq!(a.final_actions, b.final_actions);
        let ja: Vec<f64> = a.curve.records.iter().map(|r| r.j).collect();
        let jb: Vec<f64> = b.curve.records.iter().map(|r| r.j).collect();
        assert_eq!(ja, jb);

        cfg.seed = 8;
        let c = run_on_trajectory(&cfg, &env).unwrap();
        assert_ne!(a.final_actions, c.final_actions);
    }

    #[test]
    fn lqr_plain_ascent_reaches_the_riccati_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let env = LqrEnv::random_stable(2, 1, 8, &mut rng);
        let model = LinearModel::new(env.a().clone(), env.b().clone()).unwrap();
        let mut cfg = RunConfig {
            algorithm: Algorithm::ModelBased,
            steps: 2500,
            optimizer: OptimizerKind::Plain,
            seed: 1,
            ..RunConfig::default()
        };
        cfg.eta = 1.0 / env.smoothness_bound();
        let out = run_model_based(&cfg, &env, &model).unwrap();
        assert!(out.is_complete());
        let last = out.curve.records.last().unwrap();
        assert_abs_diff_eq!(last.j, env.optimal_return(), epsilon = 1e-6);
    }

    /// Chain-rule accumulation of the return gradient written as explicit
    /// products of step Jacobians, quadratic in the horizon.
    fn naive_chain_gradient(
        model: &dyn DifferentiableModel,
        env: &dyn Environment,
        traj: &Trajectory,
    ) -> GradientSequence {
        let spec = env.spec();
        let (t_end, d, k_dim) = (traj.horizon(), spec.state_dim, spec.action_dim);
        let mut a = Vec::with_capacity(t_end);
        let mut b = Vec::with_capacity(t_end);
        for t in 0..t_end {
            let (at, bt) = model.jacobians(&traj.states[t], &traj.action(t)).unwrap();
            a.push(at);
            b.push(bt);
        }
        let mut g = DMatrix::zeros(t_end, k_dim);
        for t in 0..t_end {
            // lambda_{t+1} assembled from scratch.
            let mut lambda = DVector::zeros(d);
            for s in (t + 1)..t_end {
                let mut prefix = DMatrix::identity(d, d);
                for item in a.iter().take(s).skip(t + 1) {
                    prefix *= item;
                }
                lambda += prefix * env.reward_grad_x(&traj.states[s], &traj.action(s));
            }
            let mut prefix = DMatrix::identity(d, d);
            for item in a.iter().take(t_end).skip(t + 1) {
                prefix *= item;
            }
            lambda += prefix * env.terminal_reward_grad(&traj.states[t_end]);
            let gt = env.reward_grad_u(&traj.states[t], &traj.action(t)) + &b[t] * lambda;
            g.row_mut(t).copy_from(&gt.transpose());
        }
        GradientSequence { g }
    }

    #[test]
    fn planner_gradient_matches_naive_chain_rule() {
        let env = small_pendulum(12);
        let model = PendulumModel::exact(env.params().clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let actions =
            ActionSequence::from_fn(12, 1, |_, _| rng.random_range(-0.5..0.5));
        let imagined = imagined_rollout(&model, &env, &actions).unwrap();
        let mut provider = ModelProvider::new(&model);
        let (_, g) = backward_pass(&imagined, &mut provider, &env).unwrap();
        let naive = naive_chain_gradient(&model, &env, &imagined);
        let denom = naive.g.norm().max(1.0);
        assert!((&g.g - &naive.g).norm() / denom <= 1e-10);
    }

    #[test]
    fn planner_with_true_model_matches_model_based_bitwise() {
        let env = small_pendulum(20);
        let model = PendulumModel::exact(env.params().clone()).unwrap();
        let cfg = RunConfig {
            algorithm: Algorithm::ModelBased,
            steps: 40,
            seed: 5,
            ..RunConfig::default()
        };
        let record = RecordSpec { actions: true, ..RecordSpec::default() };
        let mb = run_model_based_with(&cfg, &env, &model, record).unwrap();
        let pl = run_planner_with(&cfg, &env, &model, record).unwrap();
        assert_eq!(mb.final_actions, pl.final_actions);
        for (a, b) in mb.curve.records.iter().zip(pl.curve.records.iter()) {
            assert_eq!(a.j.to_bits(), b.j.to_bits());
            assert_eq!(a.actions, b.actions);
        }
    }

    #[test]
    fn off_trajectory_updates_the_mean_from_a_perturbed_stream() {
        // Two-step scalar env with running reward so both reward gradients
        // are exercised at the perturbed pair.
        let env = LinearEnv::new(dmatrix![0.5], dmatrix![1.0], dvector![1.0], 2)
            .unwrap()
            .with_terminal_quadratic(dmatrix![1.0])
            .unwrap();
        let cfg = RunConfig {
            algorithm: Algorithm::OffTrajectory,
            steps: 1,
            eta: 0.25,
            sigma: 0.5,
            alpha: 0.9,
            q0: 0.01,
            seed: 42,
            optimizer: OptimizerKind::Plain,
            ..RunConfig::default()
        };
        let out = run_off_trajectory(&cfg, &env).unwrap();

        // Reconstruct the run by hand: initial mean, its perturbation, the
        // resulting RLS estimates and the backward pass at the perturbed pair.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mean = initial_actions(2, 1, cfg.init_std, &mut rng);
        let perturbed = white_noise_perturb(&mean, cfg.sigma, &mut rng).unwrap();
        assert_ne!(perturbed, mean);

        let counter = RolloutCounter::new();
        let traj = rollout(&env, &perturbed, &counter).unwrap();
        let mut rls =
            RlsState::new(1, 1, 2, cfg.alpha, cfg.q0).unwrap();
        let mut provider = RlsProvider::new(&mut rls);
        let (_, g) = backward_pass(&traj, &mut provider, &env).unwrap();

        // The gradient feeds on the perturbed trajectory, the update lands
        // on the unperturbed mean.
        let expected = &mean + cfg.eta * &g.g;
        assert_abs_diff_eq!(
            out.final_actions.as_slice(),
            expected.as_slice(),
            epsilon = 1e-14
        );
        assert_ne!(out.final_actions, &perturbed + cfg.eta * &g.g);
    }

    #[test]
    fn off_trajectory_rls_approaches_constant_jacobians() {
        // Fully actuated so every direction is excited from t = 1 on; the
        // initial state is fixed, so A_0 stays at the prior and is skipped.
        let a = dmatrix![0.9, 0.2; -0.1, 0.7];
        let b = dmatrix![1.0, 0.1; 0.0, 1.0];
        let env = LinearEnv::new(a.clone(), b.clone(), dvector![0.3, -0.4], 10)
            .unwrap()
            .with_terminal_quadratic(DMatrix::identity(2, 2))
            .unwrap();
        let cfg = RunConfig {
            algorithm: Algorithm::OffTrajectory,
            steps: 3000,
            eta: 1e-12,
            sigma: 0.5,
            alpha: 0.995,
            q0: 1e-3,
            seed: 2,
            optimizer: OptimizerKind::Plain,
            ..RunConfig::default()
        };
        let out = run_off_trajectory(&cfg, &env).unwrap();
        assert!(out.is_complete());
        let rls = out.rls.unwrap();
        for t in 0..10 {
            let est = rls.estimate(t);
            let b_err = (&est.b - b.transpose()).singular_values().max();
            assert!(b_err <= 0.1, "B error {b_err} at t={t}");
            if t >= 1 {
                let a_err = (&est.a - a.transpose()).singular_values().max();
                assert!(a_err <= 0.1, "A error {a_err} at t={t}");
            }
        }
    }

    #[test]
    fn cem_degenerate_elite_set_averages_all_samples() {
        // Zero reward everywhere: every sample ties, elite order falls back
        // to sampling order.
        let env = LinearEnv::new(dmatrix![1.0], dmatrix![1.0], dvector![0.0], 3).unwrap();
        let mut cfg = RunConfig {
            algorithm: Algorithm::Cem,
            steps: 1,
            sigma: 0.3,
            samples: 4,
            elite: Some(4),
            seed: 9,
            ..RunConfig::default()
        };
        let out = run_cem(&cfg, &env).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mean = initial_actions(3, 1, cfg.init_std, &mut rng);
        let mut expected = DMatrix::zeros(3, 1);
        let mut first = None;
        for m in 0..4 {
            let s = white_noise_perturb(&mean, cfg.sigma, &mut rng).unwrap();
            if m == 0 {
                first = Some(s.clone());
            }
            expected += s;
        }
        expected /= 4.0;
        assert_abs_diff_eq!(
            out.final_actions.as_slice(),
            expected.as_slice(),
            epsilon = 1e-15
        );

        // Ties break toward the lower sample index: with L = 1 the winner
        // is the first sample.
        cfg.elite = Some(1);
        let out = run_cem(&cfg, &env).unwrap();
        assert_eq!(out.final_actions, first.unwrap());
    }

    #[test]
    fn finite_difference_gradient_matches_oracle_on_quadratic_returns() {
        let env = quadratic_linear_env(4);
        let cfg = RunConfig {
            algorithm: Algorithm::FiniteDifference,
            steps: 1,
            sigma: 1e-5,
            samples: 8,
            seed: 3,
            ..RunConfig::default()
        };
        let record = RecordSpec { gradients: true, actions: true, ..RecordSpec::default() };
        let out = run_finite_difference_with(&cfg, &env, record).unwrap();
        let rec = &out.curve.records[0];
        let fitted = rec.gradient.as_ref().unwrap();
        let counter = RolloutCounter::new();
        let exact = true_gradient(&env, rec.actions.as_ref().unwrap(), &counter).unwrap();
        assert!((&fitted.g - &exact.g).norm() / exact.g.norm().max(1.0) <= 1e-3);
    }

    #[test]
    fn preconditions_are_rejected() {
        let env = small_pendulum(5);
        let mut cfg = base_cfg(Algorithm::OnTrajectory, 2);
        cfg.samples = 0;
        assert!(run_on_trajectory(&cfg, &env).is_err());
        assert!(run_finite_difference(&cfg, &env).is_err());
        assert!(run_cem(&cfg, &env).is_err());

        let mut cfg = base_cfg(Algorithm::OffTrajectory, 2);
        cfg.alpha = 1.0;
        assert!(run_off_trajectory(&cfg, &env).is_err());

        let mut cfg = base_cfg(Algorithm::Oracle, 2);
        cfg.alpha = 1.5;
        let err = run_oracle(&cfg, &env).unwrap_err();
        assert!(err.to_string().contains("alpha must lie in (0,1]"));

        let mut cfg = base_cfg(Algorithm::Cem, 2);
        cfg.elite = Some(5);
        cfg.samples = 4;
        assert!(run_cem(&cfg, &env).is_err());
    }

    #[test]
    fn diverging_run_returns_partial_curve() {
        // Unstable scalar plant with a full-size plain-ascent step: actions
        // inflate by a factor around 3^39 per iteration until the terminal
        // reward overflows a few iterations in. The model supplies exact
        // Jacobians, which keep feeding the blow-up where finite-difference
        // probes would collapse at astronomical states.
        let env = LinearEnv::new(dmatrix![3.0], dmatrix![1.0], dvector![1.0], 40)
            .unwrap()
            .with_terminal_quadratic(dmatrix![1.0])
            .unwrap();
        let model = LinearModel::new(env.a().clone(), env.b().clone()).unwrap();
        let cfg = RunConfig {
            algorithm: Algorithm::ModelBased,
            steps: 10,
            eta: 1.0,
            optimizer: OptimizerKind::Plain,
            seed: 0,
            ..RunConfig::default()
        };
        let out = run_model_based(&cfg, &env, &model).unwrap();
        assert!(out.error.is_some());
        assert!(!out.curve.records.is_empty());
        assert!(out.curve.records.len() < 11);
        assert_eq!(out.curve.total_rollouts, out.curve.records.len() as u64 + 1);
    }

    #[test]
    fn algorithm_ids_round_trip() {
        for alg in [
            Algorithm::Oracle,
            Algorithm::ModelBased,
            Algorithm::Planner,
            Algorithm::OnTrajectory,
            Algorithm::OffTrajectory,
            Algorithm::FiniteDifference,
            Algorithm::Cem,
        ] {
            assert_eq!(Algorithm::from_id(alg.id()).unwrap(), alg);
        }
        assert!(Algorithm::from_id("sac").is_err());
    }

    #[test]
    fn initial_actions_match_requested_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = initial_actions(5000, 1, 0.01, &mut rng);
        let mean = u.iter().sum::<f64>() / 5000.0;
        let var = u.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4999.0;
        assert!(mean.abs() < 1e-3);
        assert!((var.sqrt() - 0.01).abs() < 5e-4);
    }
}
