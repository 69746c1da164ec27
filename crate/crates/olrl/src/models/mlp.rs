//! Small fully connected dynamics model.
//!
//! The network predicts the state increment `x' - x` from standardized
//! `(x, u)`, so an untrained all-zero network is the identity map and the
//! model only has to learn how the state moves, not where it is. Jacobians
//! are exact layer-wise chain rule products; nothing here is finite
//! differences.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{noise::pink_noise_sequence, DifferentiableModel};
use crate::env::{rollout, Environment, RolloutCounter};
use crate::{Error, Result};

const MAGIC: &[u8; 16] = b"OLRL-MLP-v1\0\0\0\0\0";

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Hidden layer widths; tanh activations between them.
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    /// Decoupled weight decay (applied to weights, not biases).
    pub weight_decay: f64,
    /// Number of data-collection rollouts.
    pub rollouts: usize,
    /// Per-step standard deviation of the pink-noise exploration actions.
    pub noise_scale: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![16, 16],
            epochs: 10,
            batch_size: 100,
            step_size: 0.002,
            weight_decay: 0.001,
            rollouts: 1000,
            noise_scale: 1.0,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("MlpConfig", "hidden widths must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.rollouts == 0 {
            return Err(Error::invalid("MlpConfig", "epochs, batch_size and rollouts must be positive"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("MlpConfig", format!("step_size must be > 0, got {}", self.step_size)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("MlpConfig", format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(self.noise_scale > 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::invalid("MlpConfig", format!("noise_scale must be > 0, got {}", self.noise_scale)));
        }
        Ok(())
    }
}

/// Feedforward tanh network over standardized inputs, predicting
/// standardized state increments.
#[derive(Debug, Clone)]
pub struct Mlp {
    d: usize,
    k: usize,
    /// Linear maps, `weights[l]` of shape (out, in).
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    in_mean: DVector<f64>,
    in_std: DVector<f64>,
    out_mean: DVector<f64>,
    out_std: DVector<f64>,
}

impl Mlp {
    /// Zero-weight network with identity standardization: predicts
    /// `x' = x` everywhere.
    pub fn new(d: usize, k: usize, hidden: &[usize]) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::invalid("Mlp", "state and action dimensions must be positive"));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("Mlp", "hidden widths must be positive"));
        }
        let n_in = d + k;
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(n_in);
        sizes.extend_from_slice(hidden);
        sizes.push(d);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for win in sizes.windows(2) {
            weights.push(DMatrix::zeros(win[1], win[0]));
            biases.push(DVector::zeros(win[1]));
        }
        Ok(Mlp {
            d,
            k,
            weights,
            biases,
            in_mean: DVector::zeros(n_in),
            in_std: DVector::from_element(n_in, 1.0),
            out_mean: DVector::zeros(d),
            out_std: DVector::from_element(d, 1.0),
        })
    }

    /// Glorot-uniform initialization, deterministic in the rng.
    pub fn init_random(&mut self, rng: &mut impl Rng) {
        for w in &mut self.weights {
            let bound = (6.0 / (w.nrows() + w.ncols()) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    fn set_standardization(
        &mut self,
        in_mean: DVector<f64>,
        in_std: DVector<f64>,
        out_mean: DVector<f64>,
        out_std: DVector<f64>,
    ) {
        // zero spread would divide by zero; such a dimension carries no
        // information, leave it unscaled
        self.in_std = in_std.map(|s| if s > 1e-12 { s } else { 1.0 });
        self.out_std = out_std.map(|s| if s > 1e-12 { s } else { 1.0 });
        self.in_mean = in_mean;
        self.out_mean = out_mean;
    }

    fn standardized_input(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.d + self.k);
        for i in 0..self.d {
            z[i] = (x[i] - self.in_mean[i]) / self.in_std[i];
        }
        for i in 0..self.k {
            z[self.d + i] = (u[i] - self.in_mean[self.d + i]) / self.in_std[self.d + i];
        }
        z
    }

    /// Network output in standardized units for a standardized input.
    fn net(&self, z: &DVector<f64>) -> DVector<f64> {
        let last = self.weights.len() - 1;
        let mut h = z.clone();
        for l in 0..last {
            h = (&self.weights[l] * h + &self.biases[l]).map(f64::tanh);
        }
        &self.weights[last] * h + &self.biases[last]
    }
}

impl DifferentiableModel for Mlp {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.k)
    }

    fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let y = self.net(&self.standardized_input(x, u));
        let mut out = x.clone();
        for i in 0..self.d {
            out[i] += y[i] * self.out_std[i] + self.out_mean[i];
        }
        out
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let last = self.weights.len() - 1;
        let mut h = self.standardized_input(x, u);
        // jac = d net / d z accumulated left to right through the layers
        let mut jac = self.weights[0].clone();
        for l in 0..last {
            h = (&self.weights[l] * h + &self.biases[l]).map(f64::tanh);
            // tanh' = 1 - h^2, then the next linear map
            for (i, hv) in h.iter().enumerate() {
                let scale = 1.0 - hv * hv;
                jac.row_mut(i).scale_mut(scale);
            }
            jac = &self.weights[l + 1] * jac;
        }
        // un-standardize: rows by out_std, columns by 1/in_std; add the
        // identity from the increment parameterization
        let n_in = self.d + self.k;
        let mut a = DMatrix::zeros(self.d, self.d);
        let mut b = DMatrix::zeros(self.k, self.d);
        for i in 0..self.d {
            for j in 0..n_in {
                let v = jac[(i, j)] * self.out_std[i] / self.in_std[j];
                if j < self.d {
                    a[(j, i)] = v + ((i == j) as u8 as f64);
                } else {
                    b[(j - self.d, i)] = v;
                }
            }
        }
        Ok((a, b))
    }
}

// Optimizer state for one tensor.
struct AdamSlot {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl AdamSlot {
    fn new(rows: usize, cols: usize) -> Self {
        AdamSlot { m: DMatrix::zeros(rows, cols), v: DMatrix::zeros(rows, cols) }
    }

    /// One AdamW step; `decay` is the decoupled weight decay coefficient.
    fn apply(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64, decay: f64, step: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let c1 = 1.0 - B1.powi(step);
        let c2 = 1.0 - B2.powi(step);
        for i in 0..param.nrows() {
            for j in 0..param.ncols() {
                let g = grad[(i, j)];
                let m = B1 * self.m[(i, j)] + (1.0 - B1) * g;
                let v = B2 * self.v[(i, j)] + (1.0 - B2) * g * g;
                self.m[(i, j)] = m;
                self.v[(i, j)] = v;
                let update = (m / c1) / ((v / c2).sqrt() + EPS);
                param[(i, j)] -= lr * (update + decay * param[(i, j)]);
            }
        }
    }
}

/// Collects pink-noise rollouts from the environment (counted against
/// `counter` like any other rollout), then fits the network to the
/// observed one-step state increments with AdamW.
pub fn train_mlp_model(
    env: &dyn Environment,
    cfg: &MlpConfig,
    rng: &mut impl Rng,
    counter: &RolloutCounter,
) -> Result<Mlp> {
    cfg.validate()?;
    let spec = env.spec();
    let (d, k, t_end) = (spec.state_dim, spec.action_dim, spec.horizon);

    let n_samples = cfg.rollouts * t_end;
    let mut inputs = DMatrix::zeros(n_samples, d + k);
    let mut targets = DMatrix::zeros(n_samples, d);
    let mut row = 0;
    for _ in 0..cfg.rollouts {
        let actions = pink_noise_sequence(t_end, k, cfg.noise_scale, rng)?;
        let traj = rollout(env, &actions, counter)?;
        for t in 0..t_end {
            for i in 0..d {
                inputs[(row, i)] = traj.states[t][i];
                targets[(row, i)] = traj.states[t + 1][i] - traj.states[t][i];
            }
            for i in 0..k {
                inputs[(row, d + i)] = actions[(t, i)];
            }
            row += 1;
        }
    }

    let col_stats = |m: &DMatrix<f64>| {
        let n = m.nrows() as f64;
        let mean = DVector::from_fn(m.ncols(), |j, _| m.column(j).sum() / n);
        let std = DVector::from_fn(m.ncols(), |j, _| {
            let mu = mean[j];
            (m.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt()
        });
        (mean, std)
    };
    let (in_mean, in_std) = col_stats(&inputs);
    let (out_mean, out_std) = col_stats(&targets);

    let mut model = Mlp::new(d, k, &cfg.hidden)?;
    model.set_standardization(in_mean, in_std, out_mean, out_std);
    model.init_random(rng);

    // standardize the whole dataset once
    for j in 0..d + k {
        let (mu, sd) = (model.in_mean[j], model.in_std[j]);
        for i in 0..n_samples {
            inputs[(i, j)] = (inputs[(i, j)] - mu) / sd;
        }
    }
    for j in 0..d {
        let (mu, sd) = (model.out_mean[j], model.out_std[j]);
        for i in 0..n_samples {
            targets[(i, j)] = (targets[(i, j)] - mu) / sd;
        }
    }

    let layers = model.weights.len();
    let mut w_slots: Vec<AdamSlot> =
        model.weights.iter().map(|w| AdamSlot::new(w.nrows(), w.ncols())).collect();
    let mut b_slots: Vec<AdamSlot> =
        model.biases.iter().map(|b| AdamSlot::new(b.len(), 1)).collect();
    let mut indices: Vec<usize> = (0..n_samples).collect();
    let mut step = 0i32;

    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.batch_size) {
            let bsz = chunk.len();
            let x = DMatrix::from_fn(bsz, d + k, |i, j| inputs[(chunk[i], j)]);
            let y = DMatrix::from_fn(bsz, d, |i, j| targets[(chunk[i], j)]);

            // forward, keeping activations for the backward pass
            let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(layers);
            let mut h = x;
            for l in 0..layers - 1 {
                let mut z = &h * model.weights[l].transpose();
                for mut r in z.row_iter_mut() {
                    r += model.biases[l].transpose();
                }
                acts.push(h);
                h = z.map(f64::tanh);
            }
            let mut pred = &h * model.weights[layers - 1].transpose();
            for mut r in pred.row_iter_mut() {
                r += model.biases[layers - 1].transpose();
            }
            acts.push(h);

            let diff = pred - y;
            let loss = diff.iter().map(|v| v * v).sum::<f64>() / (bsz * d) as f64;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(format!("non-finite loss at update {step}")));
            }

            // backward
            step += 1;
            let mut g = diff * (2.0 / (bsz * d) as f64);
            for l in (0..layers).rev() {
                let gw = g.transpose() * &acts[l];
                let gb = DVector::from_fn(g.ncols(), |j, _| g.column(j).sum());
                if l > 0 {
                    let mut back = g * &model.weights[l];
                    for (bv, av) in back.iter_mut().zip(acts[l].iter()) {
                        *bv *= 1.0 - av * av;
                    }
                    g = back;
                }
                w_slots[l].apply(&mut model.weights[l], &gw, cfg.step_size, cfg.weight_decay, step);
                let gb_m = DMatrix::from_column_slice(gb.len(), 1, gb.as_slice());
                let mut b_m = DMatrix::from_column_slice(model.biases[l].len(), 1, model.biases[l].as_slice());
                b_slots[l].apply(&mut b_m, &gb_m, cfg.step_size, 0.0, step);
                model.biases[l].copy_from_slice(b_m.as_slice());
            }
        }
    }
    Ok(model)
}

impl Mlp {
    /// Serialize as magic header, dimensions, standardization, weights.
    /// All integers are u64 little endian, all floats f64 little endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        let push_u64 = |buf: &mut Vec<u8>, v: usize| buf.extend_from_slice(&(v as u64).to_le_bytes());
        let push_f64s = |buf: &mut Vec<u8>, vs: &[f64]| {
            for v in vs {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        push_u64(&mut buf, self.d);
        push_u64(&mut buf, self.k);
        push_u64(&mut buf, self.weights.len());
        for w in &self.weights {
            push_u64(&mut buf, w.nrows());
        }
        push_f64s(&mut buf, self.in_mean.as_slice());
        push_f64s(&mut buf, self.in_std.as_slice());
        push_f64s(&mut buf, self.out_mean.as_slice());
        push_f64s(&mut buf, self.out_std.as_slice());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            // column-major storage order, matching DMatrix::as_slice
            push_f64s(&mut buf, w.as_slice());
            push_f64s(&mut buf, b.as_slice());
        }
        fs::write(path, &buf).map_err(|e| Error::ModelIo(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::ModelIo(format!("read {}: {e}", path.display())))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = buf.get(*pos..*pos + n).ok_or_else(|| Error::ModelIo("truncated model file".into()))?;
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 16)? != MAGIC {
            return Err(Error::ModelIo("bad magic header".into()));
        }
        let read_u64 = |pos: &mut usize| -> Result<usize> {
            let s = take(pos, 8)?;
            Ok(u64::from_le_bytes(s.try_into().unwrap()) as usize)
        };
        let d = read_u64(&mut pos)?;
        let k = read_u64(&mut pos)?;
        let layers = read_u64(&mut pos)?;
        if d == 0 || k == 0 || layers == 0 || layers > 64 {
            return Err(Error::ModelIo("implausible dimensions".into()));
        }
        let mut out_sizes = Vec::with_capacity(layers);
        for _ in 0..layers {
            out_sizes.push(read_u64(&mut pos)?);
        }
        if out_sizes[layers - 1] != d || out_sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
            return Err(Error::ModelIo("inconsistent layer sizes".into()));
        }
        let read_f64s = |pos: &mut usize, n: usize| -> Result<Vec<f64>> {
            let s = take(pos, 8 * n)?;
            Ok(s.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let in_mean = DVector::from_vec(read_f64s(&mut pos, d + k)?);
        let in_std = DVector::from_vec(read_f64s(&mut pos, d + k)?);
        let out_mean = DVector::from_vec(read_f64s(&mut pos, d)?);
        let out_std = DVector::from_vec(read_f64s(&mut pos, d)?);
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        let mut n_in = d + k;
        for &n_out in &out_sizes {
            let w = read_f64s(&mut pos, n_out * n_in)?;
            weights.push(DMatrix::from_column_slice(n_out, n_in, &w));
            biases.push(DVector::from_vec(read_f64s(&mut pos, n_out)?));
            n_in = n_out;
        }
        if pos != buf.len() {
            return Err(Error::ModelIo("trailing bytes in model file".into()));
        }
        Ok(Mlp { d, k, weights, biases, in_mean, in_std, out_mean, out_std })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn untrained_zero_network_is_the_identity_map() {
        let mlp = Mlp::new(3, 2, &[16, 16]).unwrap();
        let x = DVector::from_vec(vec![0.4, -1.0, 2.5]);
        let u = DVector::from_vec(vec![0.1, -0.2]);
        assert_eq!(mlp.predict(&x, &u), x);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let mut mlp = Mlp::new(4, 1, &[16, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        mlp.init_random(&mut rng);
        mlp.set_standardization(
            DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.05]),
            DVector::from_vec(vec![1.5, 0.7, 2.0, 1.1, 0.6]),
            DVector::from_vec(vec![0.01, 0.0, -0.02, 0.03]),
            DVector::from_vec(vec![0.2, 0.5, 0.1, 0.8]),
        );
        let h = 1e-6;
        for _ in 0..20 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0));
            let u = DVector::from_element(1, rng.random_range(-2.0..2.0));
            let (a, b) = mlp.jacobians(&x, &u).unwrap();
            for j in 0..4 {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let fp = mlp.predict(&xp, &u);
                let fm = mlp.predict(&xm, &u);
                for i in 0..4 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let denom = fd.abs().max(1e-6);
                    assert!((a[(j, i)] - fd).abs() / denom <= 1e-5, "A[({j},{i})]");
                }
            }
            let mut up = u.clone();
            up[0] += h;
            let mut um = u.clone();
            um[0] -= h;
            let fp = mlp.predict(&x, &up);
            let fm = mlp.predict(&x, &um);
            for i in 0..4 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                assert!((b[(0, i)] - fd).abs() / denom <= 1e-5, "B[(0,{i})]");
            }
        }
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let mut mlp = Mlp::new(4, 1, &[16, 16]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        mlp.init_random(&mut rng);
        mlp.set_standardization(
            DVector::from_fn(5, |i, _| i as f64 * 0.1),
            DVector::from_element(5, 1.3),
            DVector::from_element(4, -0.2),
            DVector::from_element(4, 0.7),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        mlp.save(&path).unwrap();
        let loaded = Mlp::load(&path).unwrap();
        assert_eq!(mlp.weights, loaded.weights);
        assert_eq!(mlp.biases, loaded.biases);
        assert_eq!(mlp.in_mean, loaded.in_mean);
        assert_eq!(mlp.in_std, loaded.in_std);
        assert_eq!(mlp.out_mean, loaded.out_mean);
        assert_eq!(mlp.out_std, loaded.out_std);

        let x = DVector::from_vec(vec![0.3, -0.4, 1.0, 2.0]);
        let u = DVector::from_element(1, 0.5);
        assert_eq!(mlp.predict(&x, &u), loaded.predict(&x, &u));
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"definitely not a model").unwrap();
        assert!(Mlp::load(&path).is_err());

        let mlp = Mlp::new(2, 1, &[4]).unwrap();
        let good = dir.path().join("good.bin");
        mlp.save(&good).unwrap();
        let mut bytes = fs::read(&good).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&good, &bytes).unwrap();
        assert!(Mlp::load(&good).is_err());
    }

    #[test]
    fn config_validation_rejects_nonpositive_fields() {
        let mut cfg = MlpConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = MlpConfig::default();
        cfg.step_size = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = MlpConfig::default();
        cfg.hidden = vec![16, 0];
        assert!(cfg.validate().is_err());
        assert!(MlpConfig::default().validate().is_ok());
    }
}
