//! Cart-pole swing-up.
//!
//! State is `(l, l_dot, theta, theta_dot)` with `theta = 0` upright and the
//! episode starting hanging down at rest, `x0 = (0, 0, pi, 0)`. The angle is
//! unwrapped over the reals. The single action `u` applies a horizontal
//! force `force_unit * u` to the cart. Running reward `-0.001 u^2`,
//! terminal reward `-||x||_1`, so a "solved" episode parks the cart at the
//! origin with the pole balanced upright.
//!
//! Dynamics are the standard cart-pole Lagrangian equations for a point
//! mass on a massless rod, with viscous friction `-m4 * l_dot` on the cart
//! and `-m5 * theta_dot` at the pivot, integrated by one classical RK4 step
//! of size `dt` per environment step.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{EnvSpec, Environment};
use crate::{Error, Result};

const GRAVITY: f64 = 9.81;

/// Physical parameters of the cart-pole.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    /// Cart mass m1 (kg).
    pub cart_mass: f64,
    /// Pendulum tip point mass m2 (kg).
    pub tip_mass: f64,
    /// Rod length m3 (m).
    pub length: f64,
    /// Cart viscous friction m4 (N s/m).
    pub linear_friction: f64,
    /// Pivot viscous friction m5 (N m s/rad).
    pub rotational_friction: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Newtons of force per unit of action.
    pub force_unit: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            cart_mass: 1.0,
            tip_mass: 0.1,
            length: 0.5,
            linear_friction: 0.01,
            rotational_friction: 0.01,
            dt: 0.01,
            force_unit: 50.0,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cart_mass", self.cart_mass),
            ("tip_mass", self.tip_mass),
            ("length", self.length),
            ("linear_friction", self.linear_friction),
            ("rotational_friction", self.rotational_friction),
            ("dt", self.dt),
            ("force_unit", self.force_unit),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid("PendulumParams", format!("{name} must be strictly positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Accelerations `(l_ddot, theta_ddot)` of the cart-pole at one point.
///
/// Solves the 2x2 mass-matrix system; the determinant
/// `m2 l^2 (m1 + m2 sin^2 theta)` is strictly positive.
fn accel(p: &PendulumParams, x: &[f64; 4], force: f64) -> (f64, f64) {
    let (v, th, w) = (x[1], x[2], x[3]);
    let (m1, m2, l) = (p.cart_mass, p.tip_mass, p.length);
    let (sth, cth) = th.sin_cos();
    let m00 = m1 + m2;
    let m01 = m2 * l * cth;
    let m11 = m2 * l * l;
    let det = m00 * m11 - m01 * m01;
    let rhs0 = force - p.linear_friction * v + m2 * l * w * w * sth;
    let rhs1 = m2 * GRAVITY * l * sth - p.rotational_friction * w;
    let a0 = (rhs0 * m11 - rhs1 * m01) / det;
    let a1 = (rhs1 * m00 - rhs0 * m01) / det;
    (a0, a1)
}

fn deriv(p: &PendulumParams, x: &[f64; 4], u: f64) -> [f64; 4] {
    let (a0, a1) = accel(p, x, p.force_unit * u);
    [x[1], a0, x[3], a1]
}

/// One classical RK4 step of size `dt`.
pub(crate) fn rk4_step(p: &PendulumParams, x: &[f64; 4], u: f64) -> [f64; 4] {
    let dt = p.dt;
    let k1 = deriv(p, x, u);
    let mut x2 = *x;
    for i in 0..4 {
        x2[i] = x[i] + 0.5 * dt * k1[i];
    }
    let k2 = deriv(p, &x2, u);
    let mut x3 = *x;
    for i in 0..4 {
        x3[i] = x[i] + 0.5 * dt * k2[i];
    }
    let k3 = deriv(p, &x3, u);
    let mut x4 = *x;
    for i in 0..4 {
        x4[i] = x[i] + dt * k3[i];
    }
    let k4 = deriv(p, &x4, u);
    let mut out = *x;
    for i in 0..4 {
        out[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Time derivative and its Jacobian w.r.t. `(l, l_dot, theta, theta_dot, u)`.
///
/// Row `i` of the returned matrix is `d xdot_i / d (x, u)`.
fn deriv_with_jacobian(p: &PendulumParams, x: &[f64; 4], u: f64) -> ([f64; 4], [[f64; 5]; 4]) {
    let (v, th, w) = (x[1], x[2], x[3]);
    let (m1, m2, l) = (p.cart_mass, p.tip_mass, p.length);
    let fu = p.force_unit;
    let (sth, cth) = th.sin_cos();
    let m00 = m1 + m2;
    let m01 = m2 * l * cth;
    let m11 = m2 * l * l;
    let det = m00 * m11 - m01 * m01;
    let dm01 = -m2 * l * sth; // d m01 / d theta
    let ddet = -2.0 * m01 * dm01; // d det / d theta

    let rhs0 = fu * u - p.linear_friction * v + m2 * l * w * w * sth;
    let rhs1 = m2 * GRAVITY * l * sth - p.rotational_friction * w;
    let a0 = (rhs0 * m11 - rhs1 * m01) / det;
    let a1 = (rhs1 * m00 - rhs0 * m01) / det;

    // Partials of rhs over (l, v, theta, w, u); l never appears.
    let drhs0 = [0.0, -p.linear_friction, m2 * l * w * w * cth, 2.0 * m2 * l * w * sth, fu];
    let drhs1 = [0.0, 0.0, m2 * GRAVITY * l * cth, -p.rotational_friction, 0.0];

    let mut ja0 = [0.0; 5];
    let mut ja1 = [0.0; 5];
    for j in 0..5 {
        let mut dnum0 = drhs0[j] * m11 - drhs1[j] * m01;
        let mut dnum1 = drhs1[j] * m00 - drhs0[j] * m01;
        if j == 2 {
            dnum0 -= rhs1 * dm01;
            dnum1 -= rhs0 * dm01;
            ja0[j] = (dnum0 - a0 * ddet) / det;
            ja1[j] = (dnum1 - a1 * ddet) / det;
        } else {
            ja0[j] = dnum0 / det;
            ja1[j] = dnum1 / det;
        }
    }

    let mut jac = [[0.0; 5]; 4];
    jac[0][1] = 1.0;
    jac[1] = ja0;
    jac[2][3] = 1.0;
    jac[3] = ja1;
    ([v, a0, w, a1], jac)
}

/// RK4 step together with exact tangents.
///
/// Returns the next state and the 4x5 Jacobian `d x_next / d (x, u)`
/// obtained by propagating derivatives through the four stages, so it is
/// the true derivative of [`rk4_step`] up to rounding.
pub(crate) fn rk4_step_with_tangents(p: &PendulumParams, x: &[f64; 4], u: f64) -> ([f64; 4], [[f64; 5]; 4]) {
    let dt = p.dt;
    // P = d stage_point / d (x, u) starts as [I | 0].
    let eye: [[f64; 5]; 4] = {
        let mut m = [[0.0; 5]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        m
    };

    // chain: K' = C_local * P + d_local (x) e_u, where the local Jacobian
    // rows are d xdot_i / d (stage_state, u).
    let chain = |local: &[[f64; 5]; 4], point_tan: &[[f64; 5]; 4]| -> [[f64; 5]; 4] {
        let mut out = [[0.0; 5]; 4];
        for i in 0..4 {
            for j in 0..5 {
                let mut s = local[i][4] * ((j == 4) as u8 as f64);
                for m in 0..4 {
                    s += local[i][m] * point_tan[m][j];
                }
                out[i][j] = s;
            }
        }
        out
    };
    let advance = |tan: &[[f64; 5]; 4], k_tan: &[[f64; 5]; 4], c: f64| -> [[f64; 5]; 4] {
        let mut out = *tan;
        for i in 0..4 {
            for j in 0..5 {
                out[i][j] += c * k_tan[i][j];
            }
        }
        out
    };

    let (k1, l1) = deriv_with_jacobian(p, x, u);
    let kt1 = chain(&l1, &eye);

    let mut x2 = *x;
    for i in 0..4 {
        x2[i] += 0.5 * dt * k1[i];
    }
    let (k2, l2) = deriv_with_jacobian(p, &x2, u);
    let kt2 = chain(&l2, &advance(&eye, &kt1, 0.5 * dt));

    let mut x3 = *x;
    for i in 0..4 {
        x3[i] += 0.5 * dt * k2[i];
    }
    let (k3, l3) = deriv_with_jacobian(p, &x3, u);
    let kt3 = chain(&l3, &advance(&eye, &kt2, 0.5 * dt));

    let mut x4 = *x;
    for i in 0..4 {
        x4[i] += dt * k3[i];
    }
    let (k4, l4) = deriv_with_jacobian(p, &x4, u);
    let kt4 = chain(&l4, &advance(&eye, &kt3, dt));

    let mut next = *x;
    let mut jac = eye;
    for i in 0..4 {
        next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        for j in 0..5 {
            jac[i][j] += dt / 6.0 * (kt1[i][j] + 2.0 * (kt2[i][j] + kt3[i][j]) + kt4[i][j]);
        }
    }
    (next, jac)
}

/// Swing-up task environment. See the module docs for conventions.
#[derive(Debug, Clone)]
pub struct PendulumEnv {
    params: PendulumParams,
    spec: EnvSpec,
}

impl PendulumEnv {
    pub fn new(params: PendulumParams, horizon: usize) -> Result<Self> {
        params.validate()?;
        let x0 = DVector::from_vec(vec![0.0, 0.0, std::f64::consts::PI, 0.0]);
        let spec = EnvSpec::new(4, 1, horizon, x0)?;
        Ok(PendulumEnv { params, spec })
    }

    /// Default task: default parameters, T = 100 (one second).
    pub fn default_task() -> Self {
        PendulumEnv::new(PendulumParams::default(), 100).expect("default parameters are valid")
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }
}

impl Environment for PendulumEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let xs = [x[0], x[1], x[2], x[3]];
        let next = rk4_step(&self.params, &xs, u[0]);
        DVector::from_column_slice(&next)
    }

    fn reward(&self, _x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        -0.001 * u[0] * u[0]
    }

    fn terminal_reward(&self, x: &DVector<f64>) -> f64 {
        -x.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn reward_grad_x(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(4)
    }

    fn reward_grad_u(&self, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, -0.002 * u[0])
    }

    fn terminal_reward_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        // subgradient 0 at exact zeros
        x.map(|v| {
            if v > 0.0 {
                -1.0
            } else if v < 0.0 {
                1.0
            } else {
                0.0
            }
        })
    }
}
