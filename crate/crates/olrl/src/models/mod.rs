//! Approximate dynamics models with exact derivatives.
//!
//! The backward sweep only needs something that can predict a successor
//! state and differentiate that prediction. Two implementations live here:
//! a cart-pole with log-normally perturbed physical parameters (model
//! mismatch by construction) and a small MLP trained on noisy rollouts.
//! The noise generators used for data collection and for rollout
//! perturbation live in [`noise`].

pub mod mlp;
pub mod noise;

pub use mlp::{train_mlp_model, Mlp, MlpConfig};
pub use noise::{pink_noise_sequence, white_noise_perturb};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::pendulum::{rk4_step, rk4_step_with_tangents};
use crate::env::PendulumParams;
use crate::{Error, Result};

/// A differentiable one-step dynamics approximation.
///
/// Jacobians use gradient layout: `grad_x` is `D x D` with entry `(i, j)`
/// equal to `d f_j / d x_i`, and `grad_u` is `K x D`.
pub trait DifferentiableModel: Send + Sync {
    /// `(D, K)`.
    fn dims(&self) -> (usize, usize);

    /// Predicted successor state.
    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    /// `(grad_x predict, grad_u predict)` at `(x, u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)>;
}

/// Cart-pole dynamics under (possibly perturbed) physical parameters,
/// differentiated exactly through the integrator.
#[derive(Debug, Clone)]
pub struct PendulumModel {
    params: PendulumParams,
    multipliers: [f64; 5],
}

impl PendulumModel {
    /// Model that integrates exactly the given parameters.
    pub fn exact(params: PendulumParams) -> Result<Self> {
        params.validate()?;
        Ok(PendulumModel { params, multipliers: [1.0; 5] })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    /// The five draws applied to the physical parameters, in field order.
    pub fn multipliers(&self) -> &[f64; 5] {
        &self.multipliers
    }
}

/// Cart-pole model whose five physical parameters (masses, length, both
/// frictions) are each multiplied by an independent log-normal draw,
/// `ln xi ~ N(0, s^2)`. `s = 0` reproduces the exact dynamics bit for bit;
/// the draws are a pure function of the seed.
pub fn perturbed_pendulum_model(base: &PendulumParams, s: f64, seed: u64) -> Result<PendulumModel> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::invalid("perturbation scale", format!("s must be finite and >= 0, got {s}")));
    }
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut multipliers = [1.0; 5];
    for m in &mut multipliers {
        let z: f64 = StandardNormal.sample(&mut rng);
        *m = (s * z).exp();
    }
    let mut params = *base;
    params.cart_mass *= multipliers[0];
    params.tip_mass *= multipliers[1];
    params.length *= multipliers[2];
    params.linear_friction *= multipliers[3];
    params.rotational_friction *= multipliers[4];
    params.validate()?;
    Ok(PendulumModel { params, multipliers })
}

impl DifferentiableModel for PendulumModel {
    fn dims(&self) -> (usize, usize) {
        (4, 1)
    }

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let xs = [x[0], x[1], x[2], x[3]];
        DVector::from_column_slice(&rk4_step(&self.params, &xs, u[0]))
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let xs = [x[0], x[1], x[2], x[3]];
        let (_, jac) = rk4_step_with_tangents(&self.params, &xs, u[0]);
        // jac[i][j] = d next_i / d input_j; transpose into gradient layout
        let mut a = DMatrix::zeros(4, 4);
        let mut b = DMatrix::zeros(1, 4);
        for i in 0..4 {
            for j in 0..4 {
                a[(j, i)] = jac[i][j];
            }
            b[(0, i)] = jac[i][4];
        }
        Ok((a, b))
    }
}

/// Exact model of known linear dynamics `x' = A x + B u`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() == 0 {
            return Err(Error::dims(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::dims(format!(
                "B must be {}xK with K >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(LinearModel { a, b })
    }
}

impl DifferentiableModel for LinearModel {
    fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.b.ncols())
    }

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.transpose(), self.b.transpose()))
    }
}
