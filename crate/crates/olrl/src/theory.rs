//! Certificates for ascent with estimated Jacobians.
//!
//! Gradient ascent with approximate Jacobians provably makes progress when
//! the per-step estimation errors stay below bounds built from singular
//! values of the true Jacobians, and the guaranteed rate is governed by
//! three constants derived from the error budget `(gamma, zeta)` and the
//! smoothness of the return. This module computes those bounds from data,
//! checks estimate sequences against them, and verifies measured learning
//! curves against the guaranteed rate.

use nalgebra::DMatrix;

use crate::algorithms::LearningCurve;
use crate::env::{rollout, ActionSequence, Environment, RolloutCounter};
use crate::error::{Error, Result};
use crate::jacobians::JacobianEstimate;
use crate::pontryagin::{true_gradient, GradientSequence};

/// Error-budget and smoothness constants governing the guaranteed rate.
///
/// `gamma` budgets the accumulated effect of state-Jacobian errors, `zeta`
/// the action-Jacobian errors, `l` is the smoothness constant of the
/// return and `eta` the step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TheoryConstants {
    pub gamma: f64,
    pub zeta: f64,
    pub l: f64,
    pub eta: f64,
}

impl TheoryConstants {
    pub fn new(gamma: f64, zeta: f64, l: f64, eta: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::invalid("theory constants", "gamma must be finite and >= 0"));
        }
        if !(zeta.is_finite() && zeta >= 0.0) {
            return Err(Error::invalid("theory constants", "zeta must be finite and >= 0"));
        }
        if !(l.is_finite() && l >= 0.0) {
            return Err(Error::invalid("theory constants", "l must be finite and >= 0"));
        }
        if !(eta.is_finite() && eta > 0.0) {
            return Err(Error::invalid("theory constants", "eta must be finite and > 0"));
        }
        Ok(TheoryConstants { gamma, zeta, l, eta })
    }

    /// Total error budget `gamma + zeta + gamma * zeta`.
    ///
    /// `mu` and `nu` are both defined through this quantity, and computing
    /// it once keeps their symmetry exact in floating point: `mu + nu == 2`
    /// holds bitwise whenever `1 - p` and `1 + p` round in opposite
    /// directions by less than half an ulp of 2, which covers every
    /// admissible budget.
    pub fn coupling(&self) -> f64 {
        self.gamma + self.zeta + self.gamma * self.zeta
    }

    /// Whether the budget leaves room for progress: `gamma + zeta +
    /// gamma * zeta < 1`.
    pub fn admissible(&self) -> bool {
        self.coupling() < 1.0
    }

    /// Guaranteed fraction of the true gradient recovered by the estimated
    /// one: `mu = 1 - (gamma + zeta + gamma zeta)`.
    pub fn mu(&self) -> f64 {
        1.0 - self.coupling()
    }

    /// Guaranteed cap on the estimated gradient's norm relative to the
    /// true one: `nu = 1 + gamma + zeta + gamma zeta`.
    pub fn nu(&self) -> f64 {
        1.0 + self.coupling()
    }

    /// Per-step progress coefficient `alpha = mu - eta l nu^2 / 2`; the
    /// rate guarantee needs it positive.
    pub fn alpha(&self) -> f64 {
        let nu = self.nu();
        self.mu() - 0.5 * self.eta * self.l * nu * nu
    }
}

/// Admissible per-step spectral error bounds computed from the true
/// Jacobians of one trajectory.
#[derive(Clone, Debug)]
pub struct AdmissibleErrorBounds {
    /// `rhs_a[t][s - 1]` bounds the error of the state-Jacobian estimate
    /// at step `t + s`, as seen from the gradient of action `t`, for
    /// `s = 1 .. T - 1 - t`.
    pub rhs_a: Vec<Vec<f64>>,
    /// `rhs_b[t]` bounds the error of the action-Jacobian estimate at `t`.
    pub rhs_b: Vec<f64>,
}

fn spectral_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let sv = m.clone().singular_values();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for &s in sv.iter() {
        lo = lo.min(s);
        hi = hi.max(s);
    }
    // A matrix with fewer singular values than the smaller dimension does
    // not occur; guard anyway so empty results read as rank zero.
    if !lo.is_finite() {
        lo = 0.0;
    }
    (lo, hi)
}

/// `sigma_min / sigma_max`, read as zero for a zero matrix so the bound
/// degrades to the only value a rank-zero factor can certify.
fn inverse_condition(lo: f64, hi: f64) -> f64 {
    if hi > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

/// Evaluates the admissible error bounds along `true_jacs`, one estimate
/// per step in order.
///
/// The bound on the state Jacobian at `t + s` seen from step `t` is
/// `gamma 3^{-s} (sigma_min / sigma_max)(grad_u f_t)
/// prod_{i=1}^{s-1} (sigma_min / sigma_max)(grad_x f_{t+i})
/// sigma_min(grad_x f_{t+s})`, and the bound on the action Jacobian at `t`
/// is `zeta sigma_min(grad_u f_t)`. Gradient layout does not matter here:
/// singular values are transpose-invariant.
pub fn admissible_error_bounds(
    true_jacs: &[JacobianEstimate],
    gamma: f64,
    zeta: f64,
) -> Result<AdmissibleErrorBounds> {
    if !(gamma.is_finite() && gamma > 0.0) || !(zeta.is_finite() && zeta > 0.0) {
        return Err(Error::invalid("error budget", "gamma and zeta must be finite and > 0"));
    }
    let t_end = true_jacs.len();
    if t_end == 0 {
        return Err(Error::invalid("true jacobians", "need at least one step"));
    }
    let a_range: Vec<(f64, f64)> = true_jacs.iter().map(|j| spectral_extremes(&j.a)).collect();
    let b_range: Vec<(f64, f64)> = true_jacs.iter().map(|j| spectral_extremes(&j.b)).collect();

    let mut rhs_a = Vec::with_capacity(t_end);
    for t in 0..t_end {
        // s runs while t + s itself has a successor step, so the last
        // state Jacobian with an admissible bound is the one at T - 1.
        let s_max = (t_end - 1).saturating_sub(t);
        let mut row = Vec::with_capacity(s_max);
        let mut factor = gamma * inverse_condition(b_range[t].0, b_range[t].1);
        for s in 1..=s_max {
            factor /= 3.0;
            row.push(factor * a_range[t + s].0);
            factor *= inverse_condition(a_range[t + s].0, a_range[t + s].1);
        }
        rhs_a.push(row);
    }
    let rhs_b = (0..t_end).map(|t| zeta * b_range[t].0).collect();
    Ok(AdmissibleErrorBounds { rhs_a, rhs_b })
}

/// Outcome of checking one estimate sequence against the bounds.
#[derive(Clone, Debug)]
pub struct AdmissibleErrorCheck {
    pub bounds: AdmissibleErrorBounds,
    /// Spectral error of each state-Jacobian estimate.
    pub error_a: Vec<f64>,
    /// Spectral error of each action-Jacobian estimate.
    pub error_b: Vec<f64>,
    /// `ok_a[t][s - 1]`: error of the state estimate at `t + s` within its
    /// bound as seen from step `t`.
    pub ok_a: Vec<Vec<bool>>,
    pub ok_b: Vec<bool>,
    /// Whether the budget itself admits progress.
    pub constants_admissible: bool,
    /// True when the budget is admissible and every cell holds.
    pub verdict: bool,
}

/// Checks `estimates` against the bounds generated by `true_jacs`.
pub fn admissible_error_check(
    true_jacs: &[JacobianEstimate],
    estimates: &[JacobianEstimate],
    gamma: f64,
    zeta: f64,
) -> Result<AdmissibleErrorCheck> {
    if true_jacs.len() != estimates.len() {
        return Err(Error::dims(format!(
            "{} true steps against {} estimates",
            true_jacs.len(),
            estimates.len()
        )));
    }
    let bounds = admissible_error_bounds(true_jacs, gamma, zeta)?;
    let mut error_a = Vec::with_capacity(true_jacs.len());
    let mut error_b = Vec::with_capacity(true_jacs.len());
    for (tj, est) in true_jacs.iter().zip(estimates.iter()) {
        if est.a.shape() != tj.a.shape() || est.b.shape() != tj.b.shape() {
            return Err(Error::dims(format!("estimate at t={} has mismatched shape", est.t)));
        }
        error_a.push(spectral_extremes(&(&est.a - &tj.a)).1);
        error_b.push(spectral_extremes(&(&est.b - &tj.b)).1);
    }
    let ok_a: Vec<Vec<bool>> = bounds
        .rhs_a
        .iter()
        .enumerate()
        .map(|(t, row)| {
            row.iter().enumerate().map(|(i, &rhs)| error_a[t + i + 1] <= rhs).collect()
        })
        .collect();
    let ok_b: Vec<bool> =
        bounds.rhs_b.iter().zip(error_b.iter()).map(|(&rhs, &err)| err <= rhs).collect();
    let p = gamma + zeta + gamma * zeta;
    let constants_admissible = p < 1.0;
    let verdict = constants_admissible
        && ok_a.iter().all(|row| row.iter().all(|&x| x))
        && ok_b.iter().all(|&x| x);
    Ok(AdmissibleErrorCheck { bounds, error_a, error_b, ok_a, ok_b, constants_admissible, verdict })
}

/// Measured average squared gradient norms against the guaranteed rate.
#[derive(Clone, Debug)]
pub struct RateGuaranteeReport {
    /// `lhs[t]`: average over recorded iterates of the squared exact
    /// gradient norm of action `t`.
    pub lhs: Vec<f64>,
    /// `(j_star - j_initial) / (alpha eta n)`, one bound for every `t`.
    pub rhs: f64,
    pub satisfied: Vec<bool>,
    /// Number of iterates averaged over.
    pub iterates: usize,
    pub j_initial: f64,
    pub alpha: f64,
}

impl RateGuaranteeReport {
    pub fn all_satisfied(&self) -> bool {
        self.satisfied.iter().all(|&x| x)
    }
}

/// Checks a learning curve against the guaranteed ascent rate: for every
/// action index, the average squared exact gradient norm over the first
/// `n` iterates is at most `(j_star - j_initial) / (alpha eta n)`.
///
/// `curve` must carry exact gradient norms on its work records (run with a
/// record spec whose `oracle` flag is set); evaluation-only records carry
/// none and are skipped. `j_star` is the optimal return.
pub fn rate_guarantee_report(
    curve: &LearningCurve,
    constants: &TheoryConstants,
    j_star: f64,
) -> Result<RateGuaranteeReport> {
    if !j_star.is_finite() {
        return Err(Error::invalid("rate guarantee", "j_star must be finite"));
    }
    let alpha = constants.alpha();
    if !(alpha > 0.0) {
        return Err(Error::invalid(
            "theory constants",
            format!("alpha must be positive for the rate guarantee, got {alpha}"),
        ));
    }
    let mut norms: Vec<&Vec<f64>> = Vec::new();
    let mut j_initial = None;
    for rec in &curve.records {
        if let Some(n) = &rec.oracle_grad_norms {
            norms.push(n);
            j_initial.get_or_insert(rec.j);
        }
    }
    let n = norms.len();
    let (Some(j_initial), Some(first)) = (j_initial, norms.first()) else {
        return Err(Error::invalid("rate guarantee", "curve carries no exact gradient norms"));
    };
    let t_end = first.len();
    if norms.iter().any(|v| v.len() != t_end) {
        return Err(Error::dims("records disagree on the horizon".to_owned()));
    }
    let mut lhs = vec![0.0; t_end];
    for v in &norms {
        for (acc, &x) in lhs.iter_mut().zip(v.iter()) {
            *acc += x * x;
        }
    }
    for acc in &mut lhs {
        *acc /= n as f64;
    }
    let rhs = (j_star - j_initial) / (alpha * constants.eta * n as f64);
    let satisfied = lhs.iter().map(|&l| l <= rhs).collect();
    Ok(RateGuaranteeReport { lhs, rhs, satisfied, iterates: n, j_initial, alpha })
}

/// Per-step outcome of comparing an estimated gradient against the exact
/// one.
#[derive(Clone, Debug)]
pub struct MonitorReport {
    /// `g_t . grad_t >= mu ||grad_t||^2`.
    pub inner_ok: Vec<bool>,
    /// `||g_t|| <= nu ||grad_t||`.
    pub norm_ok: Vec<bool>,
}

impl MonitorReport {
    pub fn all_ok(&self) -> bool {
        self.inner_ok.iter().all(|&x| x) && self.norm_ok.iter().all(|&x| x)
    }

    /// Fraction of steps where both conditions hold.
    pub fn fraction_ok(&self) -> f64 {
        if self.inner_ok.is_empty() {
            return 1.0;
        }
        let hits = self
            .inner_ok
            .iter()
            .zip(self.norm_ok.iter())
            .filter(|(&a, &b)| a && b)
            .count();
        hits as f64 / self.inner_ok.len() as f64
    }
}

/// Checks, step by step, whether an estimated gradient sequence behaves
/// like a `(mu, nu)`-approximation of the exact one: enough inner product
/// to ascend, bounded overshoot in norm. Both comparisons are non-strict,
/// so an exact match passes at `mu = nu = 1`.
pub fn gradient_quality_monitor(
    estimated: &GradientSequence,
    exact: &GradientSequence,
    mu: f64,
    nu: f64,
) -> Result<MonitorReport> {
    if !(mu.is_finite() && nu.is_finite() && mu <= nu) {
        return Err(Error::invalid("monitor", "need finite mu <= nu"));
    }
    if estimated.g.shape() != exact.g.shape() {
        return Err(Error::dims(format!(
            "estimated gradient is {:?}, exact is {:?}",
            estimated.g.shape(),
            exact.g.shape()
        )));
    }
    let t_end = exact.g.nrows();
    let mut inner_ok = Vec::with_capacity(t_end);
    let mut norm_ok = Vec::with_capacity(t_end);
    for t in 0..t_end {
        let g = estimated.g.row(t);
        let ex = exact.g.row(t);
        let ex_sq = ex.norm_squared();
        inner_ok.push(g.dot(&ex) >= mu * ex_sq);
        norm_ok.push(g.norm() <= nu * ex_sq.sqrt());
    }
    Ok(MonitorReport { inner_ok, norm_ok })
}

/// Worst relative disagreement between the costate-based gradient and a
/// central finite difference of the return.
#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// `(t, action dim)` where the worst disagreement occurred.
    pub worst: (usize, usize),
}

/// Central-difference validation of the exact gradient at `actions`:
/// perturbs every action coordinate by `+-h`, differences the returns and
/// compares against the backward-sweep gradient, reporting the worst
/// `|g - fd| / max(|fd|, 1e-8)`. Costs `2 T K + 1` rollouts on a local
/// counter.
pub fn gradient_check(
    env: &dyn Environment,
    actions: &ActionSequence,
    h: f64,
) -> Result<GradientCheck> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid("gradient check", "h must be finite and > 0"));
    }
    let counter = RolloutCounter::new();
    let g = true_gradient(env, actions, &counter)?;
    let mut worst = (0usize, 0usize);
    let mut max_rel: f64 = 0.0;
    let mut probe = actions.clone();
    for t in 0..actions.nrows() {
        for j in 0..actions.ncols() {
            probe[(t, j)] = actions[(t, j)] + h;
            let plus = rollout(env, &probe, &counter)?.return_j;
            probe[(t, j)] = actions[(t, j)] - h;
            let minus = rollout(env, &probe, &counter)?.return_j;
            probe[(t, j)] = actions[(t, j)];
            let fd = (plus - minus) / (2.0 * h);
            let rel = (g.g[(t, j)] - fd).abs() / fd.abs().max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = (t, j);
            }
        }
    }
    Ok(GradientCheck { max_relative_error: max_rel, worst })
}

/// Largest observed ratio `||grad_t J(uA) - grad_t J(uB)|| / ||uA - uB||`
/// over `pairs` random perturbation pairs around `base`, a cheap lower
/// estimate of the smoothness constant. Probes the dynamics through exact
/// gradients; the rollouts stay on a local counter.
pub fn empirical_smoothness(
    env: &dyn Environment,
    base: &ActionSequence,
    radius: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::invalid("smoothness probe", "radius must be finite and > 0"));
    }
    if pairs == 0 {
        return Err(Error::invalid("smoothness probe", "need at least one pair"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counter = RolloutCounter::new();
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let ua = crate::models::white_noise_perturb(base, radius, &mut rng)?;
        let ub = crate::models::white_noise_perturb(base, radius, &mut rng)?;
        let du = (&ua - &ub).norm();
        if du == 0.0 {
            continue;
        }
        let ga = true_gradient(env, &ua, &counter)?;
        let gb = true_gradient(env, &ub, &counter)?;
        for t in 0..ga.g.nrows() {
            let dg = (ga.g.row(t) - gb.g.row(t)).norm();
            best = best.max(dg / du);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{run_oracle_with, Algorithm, RecordSpec, RunConfig};
    use crate::env::{LinearEnv, LqrEnv};
    use crate::optim::OptimizerKind;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constants(gamma: f64, zeta: f64, l: f64, eta: f64) -> TheoryConstants {
        TheoryConstants::new(gamma, zeta, l, eta).unwrap()
    }

    fn identity_jacs(d: usize, k: usize, t_end: usize) -> Vec<JacobianEstimate> {
        (0..t_end)
            .map(|t| JacobianEstimate {
                a: DMatrix::identity(d, d),
                b: DMatrix::identity(k, d),
                c: None,
                t,
            })
            .collect()
    }

    #[test]
    fn constants_match_pinned_arithmetic() {
        let c = constants(0.0, 0.0, 2.0, 0.1);
        assert_eq!(c.mu(), 1.0);
        assert_eq!(c.nu(), 1.0);
        assert_eq!(c.alpha(), 0.9);
        assert!(c.admissible());

        let c = constants(0.3, 0.2, 1.0, 0.01);
        assert!((c.mu() - 0.44).abs() < 1e-15);
        assert!((c.nu() - 1.56).abs() < 1e-15);
        assert!(c.admissible());

        // Budget exactly at the boundary is inadmissible.
        let c = constants(0.5, 0.5, 1.0, 0.01);
        assert!(!c.admissible());
        assert_eq!(c.mu(), -0.25);

        assert!(TheoryConstants::new(-0.1, 0.0, 1.0, 0.1).is_err());
        assert!(TheoryConstants::new(0.1, 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn mu_nu_identities_exact_on_dyadic_grid() {
        // On multiples of 1/64 every intermediate (sum, product, 1 +- p)
        // is exactly representable, so both identities must hold bitwise.
        for i in 0..=48u32 {
            for j in 0..=48u32 {
                let gamma = i as f64 / 64.0;
                let zeta = j as f64 / 64.0;
                let c = constants(gamma, zeta, 1.0, 0.1);
                assert_eq!(c.mu() + c.nu(), 2.0, "gamma={gamma} zeta={zeta}");
                assert_eq!(
                    c.nu() - c.mu(),
                    2.0 * (gamma + zeta + gamma * zeta),
                    "gamma={gamma} zeta={zeta}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn mu_nu_symmetry_holds_off_grid(gamma in 0.0f64..0.41, zeta in 0.0f64..0.41) {
            let c = constants(gamma, zeta, 1.0, 0.1);
            // The shared-intermediate construction keeps the sum exact even
            // for budgets that are not representable.
            prop_assert_eq!(c.mu() + c.nu(), 2.0);
            let spread = c.nu() - c.mu();
            let expected = 2.0 * c.coupling();
            prop_assert!((spread - expected).abs() <= 1e-15 * (1.0 + expected));
        }

        #[test]
        fn bounds_scale_monotonically_with_the_budget(
            seed in 0u64..1000,
            g1 in 0.01f64..0.5,
            g2 in 0.01f64..0.5,
            z1 in 0.01f64..0.5,
            z2 in 0.01f64..0.5,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jacs: Vec<JacobianEstimate> = (0..4)
                .map(|t| JacobianEstimate {
                    a: DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0)),
                    b: DMatrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0)),
                    c: None,
                    t,
                })
                .collect();
            let (glo, ghi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let (zlo, zhi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
            let lo = admissible_error_bounds(&jacs, glo, zlo).unwrap();
            let hi = admissible_error_bounds(&jacs, ghi, zhi).unwrap();
            for (rl, rh) in lo.rhs_a.iter().zip(hi.rhs_a.iter()) {
                for (&a, &b) in rl.iter().zip(rh.iter()) {
                    prop_assert!(a <= b + 1e-18);
                }
            }
            for (&a, &b) in lo.rhs_b.iter().zip(hi.rhs_b.iter()) {
                prop_assert!(a <= b + 1e-18);
            }
        }
    }

    #[test]
    fn bounds_match_pinned_examples() {
        // Identity Jacobians: every inverse condition number is 1 and
        // every sigma_min is 1, so the bound at distance s is gamma / 3^s.
        let jacs = identity_jacs(2, 1, 4);
        let b = admissible_error_bounds(&jacs, 0.3, 0.2).unwrap();
        // Bounds reach the state Jacobian at T - 1 and no further.
        assert_eq!(b.rhs_a[0].len(), 3);
        assert_eq!(b.rhs_a[1].len(), 2);
        assert_eq!(b.rhs_a[2].len(), 1);
        assert_eq!(b.rhs_a[3].len(), 0);
        assert!((b.rhs_a[0][0] - 0.1).abs() < 1e-15);
        assert!((b.rhs_a[0][1] - 0.3 / 9.0).abs() < 1e-15);
        assert!((b.rhs_a[0][2] - 0.3 / 27.0).abs() < 1e-15);
        assert!((b.rhs_a[1][0] - 0.1).abs() < 1e-15);
        assert!((b.rhs_a[2][0] - 0.1).abs() < 1e-15);
        for &rb in &b.rhs_b {
            assert!((rb - 0.2).abs() < 1e-16);
        }

        // Scalar chain: gamma/3 * (b0/b0) * a1 with a1 = 3 gives gamma.
        let jacs = vec![
            JacobianEstimate { a: dmatrix![2.0], b: dmatrix![0.5], c: None, t: 0 },
            JacobianEstimate { a: dmatrix![3.0], b: dmatrix![4.0], c: None, t: 1 },
        ];
        let b = admissible_error_bounds(&jacs, 0.3, 0.2).unwrap();
        assert!((b.rhs_a[0][0] - 0.3).abs() < 1e-15);
        assert!(b.rhs_a[1].is_empty());
        assert!((b.rhs_b[0] - 0.1).abs() < 1e-16);
        assert!((b.rhs_b[1] - 0.8).abs() < 1e-15);

        assert!(admissible_error_bounds(&jacs, 0.0, 0.2).is_err());
        assert!(admissible_error_bounds(&[], 0.3, 0.2).is_err());
    }

    #[test]
    fn exact_estimates_pass_the_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let jacs: Vec<JacobianEstimate> = (0..5)
            .map(|t| JacobianEstimate {
                a: DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)),
                b: DMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0)),
                c: None,
                t,
            })
            .collect();
        let check = admissible_error_check(&jacs, &jacs, 0.2, 0.2).unwrap();
        assert!(check.verdict);
        assert!(check.constants_admissible);
        assert!(check.error_a.iter().all(|&e| e == 0.0));
        assert!(check.error_b.iter().all(|&e| e == 0.0));

        // Same estimates, inadmissible budget: cells hold, verdict fails.
        let check = admissible_error_check(&jacs, &jacs, 0.5, 0.5).unwrap();
        assert!(!check.constants_admissible);
        assert!(!check.verdict);
        assert!(check.ok_b.iter().all(|&x| x));
    }

    #[test]
    fn single_violation_is_localized() {
        let truth = vec![
            JacobianEstimate { a: dmatrix![0.9], b: dmatrix![1.0], c: None, t: 0 },
            JacobianEstimate { a: dmatrix![0.8], b: dmatrix![1.5], c: None, t: 1 },
        ];
        let bounds = admissible_error_bounds(&truth, 0.3, 0.2).unwrap();
        let budget = bounds.rhs_a[0][0];
        let mut est = truth.clone();
        est[1].a[(0, 0)] += budget * 1.01;
        let check = admissible_error_check(&truth, &est, 0.3, 0.2).unwrap();
        assert!(!check.verdict);
        assert!(!check.ok_a[0][0]);
        assert!(check.ok_b.iter().all(|&x| x));
        assert!((check.error_a[1] - budget * 1.01).abs() < 1e-15);

        // Shrink the injection under the budget and the check passes.
        let mut est = truth.clone();
        est[1].a[(0, 0)] += budget * 0.99;
        assert!(admissible_error_check(&truth, &est, 0.3, 0.2).unwrap().verdict);
    }

    fn oracle_curve(env: &LqrEnv, eta: f64, steps: usize) -> crate::algorithms::LearningCurve {
        let cfg = RunConfig {
            env: "lqr".to_owned(),
            horizon: env.spec().horizon,
            algorithm: Algorithm::Oracle,
            steps,
            eta,
            optimizer: OptimizerKind::Plain,
            seed: 4,
            init_std: 0.1,
            ..RunConfig::default()
        };
        let record = RecordSpec { oracle: true, ..RecordSpec::default() };
        let out = run_oracle_with(&cfg, env, record).unwrap();
        assert!(out.is_complete());
        out.curve
    }

    #[test]
    fn rate_guarantee_holds_for_plain_ascent_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..20 {
            let d = rng.random_range(1..=3);
            let k = rng.random_range(1..=2);
            let t_end = rng.random_range(2..=8);
            let env = LqrEnv::random_stable(d, k, t_end, &mut rng);
            let l = env.smoothness_bound();
            let eta = 1.0 / l;
            let curve = oracle_curve(&env, eta, 40);
            let c = constants(0.0, 0.0, l, eta);
            assert!(c.alpha() > 0.0);
            let report = rate_guarantee_report(&curve, &c, env.optimal_return()).unwrap();
            assert_eq!(report.iterates, 40);
            assert!(
                report.all_satisfied(),
                "instance {i}: lhs {:?} rhs {}",
                report.lhs,
                report.rhs
            );
        }
    }

    #[test]
    fn rate_report_handles_degenerate_runs() {
        // Zero reward everywhere: every gradient is zero and the bound is
        // zero, satisfied with equality.
        let env = LinearEnv::new(dmatrix![0.5], dmatrix![1.0], dvector![1.0], 3).unwrap();
        let cfg = RunConfig {
            algorithm: Algorithm::Oracle,
            steps: 5,
            eta: 0.1,
            optimizer: OptimizerKind::Plain,
            ..RunConfig::default()
        };
        let record = RecordSpec { oracle: true, ..RecordSpec::default() };
        let out = run_oracle_with(&cfg, &env, record).unwrap();
        let c = constants(0.0, 0.0, 0.0, 0.1);
        let report = rate_guarantee_report(&out.curve, &c, 0.0).unwrap();
        assert_eq!(report.rhs, 0.0);
        assert!(report.lhs.iter().all(|&l| l == 0.0));
        assert!(report.all_satisfied());

        // Without recorded exact norms the report cannot be formed.
        let bare = run_oracle_with(&cfg, &env, RecordSpec::default()).unwrap();
        assert!(rate_guarantee_report(&bare.curve, &c, 0.0).is_err());

        // A step size too large for the smoothness gives alpha <= 0.
        let c = TheoryConstants::new(0.0, 0.0, 10.0, 1.0).unwrap();
        assert!(rate_guarantee_report(&out.curve, &c, 0.0).is_err());
    }

    #[test]
    fn monitor_flags_match_hand_cases() {
        let exact = GradientSequence { g: dmatrix![1.0, 0.0; 0.0, 2.0] };

        // Exact match passes with equality at mu = nu = 1.
        let rep = gradient_quality_monitor(&exact, &exact, 1.0, 1.0).unwrap();
        assert!(rep.all_ok());
        assert_eq!(rep.fraction_ok(), 1.0);

        // Doubled gradient: plenty of inner product, too much norm.
        let doubled = GradientSequence { g: 2.0 * &exact.g };
        let rep = gradient_quality_monitor(&doubled, &exact, 0.5, 1.5).unwrap();
        assert!(rep.inner_ok.iter().all(|&x| x));
        assert!(rep.norm_ok.iter().all(|&x| !x));
        assert_eq!(rep.fraction_ok(), 0.0);

        // Orthogonal gradient fails the inner condition, passes the norm.
        let ortho = GradientSequence { g: dmatrix![0.0, 1.0; 2.0, 0.0] };
        let rep = gradient_quality_monitor(&ortho, &exact, 0.5, 1.5).unwrap();
        assert!(rep.inner_ok.iter().all(|&x| !x));
        assert!(rep.norm_ok.iter().all(|&x| x));

        // Zero exact gradient: inner holds trivially, norm only for zero.
        let zero = GradientSequence { g: dmatrix![0.0; 0.0] };
        let one = GradientSequence { g: dmatrix![1.0; 0.0] };
        let rep = gradient_quality_monitor(&one, &zero, 0.5, 1.5).unwrap();
        assert!(rep.inner_ok[0] && !rep.norm_ok[0]);
        assert!(rep.inner_ok[1] && rep.norm_ok[1]);

        assert!(gradient_quality_monitor(&exact, &exact, 1.5, 1.0).is_err());
        assert!(gradient_quality_monitor(&one, &exact, 0.5, 1.5).is_err());
    }

    #[test]
    fn gradient_check_is_tight_on_smooth_envs() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let env = LqrEnv::random_stable(3, 2, 10, &mut rng);
        let actions = ActionSequence::from_fn(10, 2, |_, _| rng.random_range(-0.5..0.5));
        let check = gradient_check(&env, &actions, 1e-5).unwrap();
        assert!(
            check.max_relative_error <= 1e-6,
            "relative error {}",
            check.max_relative_error
        );

        // Zero-reward env: both sides vanish, the error is exactly zero.
        let env = LinearEnv::new(dmatrix![0.5], dmatrix![1.0], dvector![1.0], 4).unwrap();
        let actions = ActionSequence::from_fn(4, 1, |_, _| 0.3);
        let check = gradient_check(&env, &actions, 1e-5).unwrap();
        assert_eq!(check.max_relative_error, 0.0);

        assert!(gradient_check(&env, &actions, 0.0).is_err());
    }

    #[test]
    fn gradient_check_meets_the_pendulum_tolerance() {
        use crate::env::PendulumEnv;
        let env = PendulumEnv::new(crate::env::PendulumParams::default(), 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let actions = ActionSequence::from_fn(30, 1, |_, _| 0.01 * rng.random_range(-1.0..1.0));
        let check = gradient_check(&env, &actions, 1e-5).unwrap();
        assert!(
            check.max_relative_error <= 1e-4,
            "relative error {}",
            check.max_relative_error
        );
    }

    #[test]
    fn empirical_smoothness_stays_under_the_analytic_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let env = LqrEnv::random_stable(2, 1, 6, &mut rng);
        let base = ActionSequence::zeros(6, 1);
        let l_hat = empirical_smoothness(&env, &base, 0.5, 8, 7).unwrap();
        assert!(l_hat > 0.0);
        assert!(l_hat <= env.smoothness_bound() * (1.0 + 1e-6));
        assert!(empirical_smoothness(&env, &base, 0.0, 8, 7).is_err());
        assert!(empirical_smoothness(&env, &base, 0.5, 0, 7).is_err());
    }
}
