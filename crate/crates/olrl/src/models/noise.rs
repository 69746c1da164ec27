//! Noise generators for exploration and data collection.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::env::ActionSequence;
use crate::{Error, Result};

/// Temporally correlated zero-mean noise with power spectral density
/// proportional to `1/f`, independent across the `K` action dimensions.
///
/// Synthesis is spectral: filter a white Gaussian sequence by `1/sqrt(f)`
/// in the frequency domain (DC bin zeroed, so every column sums to zero),
/// transform back, and rescale each column to per-step standard deviation
/// `scale`. A single-step sequence has no nonzero frequencies and comes
/// back as zeros.
pub fn pink_noise_sequence(t: usize, k: usize, scale: f64, rng: &mut impl Rng) -> Result<ActionSequence> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::invalid("noise scale", format!("scale must be finite and > 0, got {scale}")));
    }
    if t == 0 || k == 0 {
        return Err(Error::invalid("noise shape", format!("need t >= 1 and k >= 1, got t={t}, k={k}")));
    }
    let mut out = DMatrix::zeros(t, k);
    if t == 1 {
        return Ok(out);
    }

    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(t);
    let inverse = planner.plan_fft_inverse(t);
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); t];

    for dim in 0..k {
        for slot in buf.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *slot = Complex::new(z, 0.0);
        }
        forward.process(&mut buf);
        buf[0] = Complex::new(0.0, 0.0);
        for (f, slot) in buf.iter_mut().enumerate().skip(1) {
            // bins f and t-f alias the same physical frequency
            let freq = f.min(t - f) as f64;
            *slot *= 1.0 / freq.sqrt();
        }
        inverse.process(&mut buf);
        // real part of the inverse transform of a Hermitian-filtered real
        // signal; imaginary residue is rounding noise
        let mut sumsq = 0.0;
        for v in buf.iter() {
            sumsq += v.re * v.re;
        }
        let rms = (sumsq / t as f64).sqrt();
        if rms > 0.0 {
            let gain = scale / rms;
            for (i, v) in buf.iter().enumerate() {
                out[(i, dim)] = v.re * gain;
            }
        }
    }
    Ok(out)
}

/// Independent Gaussian perturbation of every entry of `base`;
/// `sigma = 0` returns `base` unchanged.
pub fn white_noise_perturb(base: &ActionSequence, sigma: f64, rng: &mut impl Rng) -> Result<ActionSequence> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("noise scale", format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(base.clone());
    }
    Ok(base.map(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + sigma * z
    }))
}
