//! Exactly linear dynamics with zero (or purely terminal quadratic) reward.
//!
//! The workhorse for estimator tests: Jacobian recovery is exact, and with
//! no running reward the backward sweep has a closed form.

use nalgebra::{DMatrix, DVector};

use super::{EnvSpec, Environment};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LinearEnv {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    qf: Option<DMatrix<f64>>,
    spec: EnvSpec,
}

impl LinearEnv {
    /// `x' = A x + B u`, zero reward everywhere.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, x0: DVector<f64>, horizon: usize) -> Result<Self> {
        let d = a.nrows();
        if a.ncols() != d {
            return Err(Error::dims(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != d {
            return Err(Error::dims(format!("B has {} rows, expected {d}", b.nrows())));
        }
        let spec = EnvSpec::new(d, b.ncols(), horizon, x0)?;
        Ok(LinearEnv { a, b, qf: None, spec })
    }

    /// Adds a terminal reward `-x^T Qf x`.
    pub fn with_terminal_quadratic(mut self, qf: DMatrix<f64>) -> Result<Self> {
        let d = self.spec.state_dim;
        if qf.nrows() != d || qf.ncols() != d {
            return Err(Error::dims(format!("Qf must be {d}x{d}")));
        }
        self.qf = Some(qf);
        Ok(self)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
}

impl Environment for LinearEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn reward(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> f64 {
        0.0
    }

    fn terminal_reward(&self, x: &DVector<f64>) -> f64 {
        match &self.qf {
            Some(qf) => -(x.transpose() * qf * x)[(0, 0)],
            None => 0.0,
        }
    }

    fn reward_grad_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.spec.state_dim)
    }

    fn reward_grad_u(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.spec.action_dim)
    }

    fn terminal_reward_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.qf {
            Some(qf) => (qf * x) * -2.0,
            None => DVector::zeros(self.spec.state_dim),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn terminal_quadratic_reward_and_gradient() {
        let env = LinearEnv::new(dmatrix![1.0], dmatrix![1.0], DVector::zeros(1), 2)
            .unwrap()
            .with_terminal_quadratic(dmatrix![1.0])
            .unwrap();
        let x = DVector::from_element(1, 3.0);
        assert_eq!(env.terminal_reward(&x), -9.0);
        assert_eq!(env.terminal_reward_grad(&x)[0], -6.0);
        assert_eq!(env.reward(&x, &DVector::zeros(1)), 0.0);
    }

    #[test]
    fn rejects_mismatched_blocks() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::<f64>::zeros(3, 1);
        assert!(LinearEnv::new(a.clone(), b, DVector::zeros(2), 2).is_err());
        let ok = LinearEnv::new(a, DMatrix::zeros(2, 1), DVector::zeros(2), 2).unwrap();
        assert!(ok.with_terminal_quadratic(DMatrix::identity(3, 3)).is_err());
    }
}
