//! Gradient ascent over the whole action matrix.
//!
//! The decision variable is the `T x K` action sequence, updated in place.
//! Two rules: plain ascent `u += eta * g`, and Adam with the usual
//! bias-corrected moments (ascent direction, since returns are maximized).

use nalgebra::DMatrix;

use crate::env::ActionSequence;
use crate::pontryagin::GradientSequence;
use crate::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Plain,
    Adam,
}

/// Step rule plus whatever state it carries between iterations.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    eta: f64,
    m: DMatrix<f64>,
    v: DMatrix<f64>,
    step: i32,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, eta: f64, horizon: usize, action_dim: usize) -> Result<Self> {
        if !(eta > 0.0) || !eta.is_finite() {
            return Err(Error::invalid("step size", format!("eta must be finite and > 0, got {eta}")));
        }
        Ok(OptimizerState {
            kind,
            eta,
            m: DMatrix::zeros(horizon, action_dim),
            v: DMatrix::zeros(horizon, action_dim),
            step: 0,
        })
    }

    pub fn plain(eta: f64, horizon: usize, action_dim: usize) -> Result<Self> {
        OptimizerState::new(OptimizerKind::Plain, eta, horizon, action_dim)
    }

    pub fn adam(eta: f64, horizon: usize, action_dim: usize) -> Result<Self> {
        OptimizerState::new(OptimizerKind::Adam, eta, horizon, action_dim)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> i32 {
        self.step
    }

    /// First moment estimate (Adam); zeros for plain ascent.
    pub fn moments(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.m, &self.v)
    }
}

/// One ascent step on `actions` in place.
///
/// Rejects non-finite gradients, naming the first offending step.
pub fn apply_update(
    state: &mut OptimizerState,
    actions: &mut ActionSequence,
    g: &GradientSequence,
) -> Result<()> {
    if actions.shape() != g.g.shape() || actions.shape() != state.m.shape() {
        return Err(Error::dims(format!(
            "actions {:?}, gradient {:?} and optimizer {:?} shapes must agree",
            actions.shape(),
            g.g.shape(),
            state.m.shape()
        )));
    }
    for t in 0..g.g.nrows() {
        for j in 0..g.g.ncols() {
            if !g.g[(t, j)].is_finite() {
                return Err(Error::NonFiniteGradient { t });
            }
        }
    }

    state.step += 1;
    match state.kind {
        OptimizerKind::Plain => {
            for (a, gv) in actions.iter_mut().zip(g.g.iter()) {
                *a += state.eta * gv;
            }
        }
        OptimizerKind::Adam => {
            let c1 = 1.0 - BETA1.powi(state.step);
            let c2 = 1.0 - BETA2.powi(state.step);
            for t in 0..actions.nrows() {
                for j in 0..actions.ncols() {
                    let gv = g.g[(t, j)];
                    let m = BETA1 * state.m[(t, j)] + (1.0 - BETA1) * gv;
                    let v = BETA2 * state.v[(t, j)] + (1.0 - BETA2) * gv * gv;
                    state.m[(t, j)] = m;
                    state.v[(t, j)] = v;
                    actions[(t, j)] += state.eta * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
    Ok(())
}
