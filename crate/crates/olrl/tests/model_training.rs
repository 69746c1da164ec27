//! End-to-end MLP training quality on a linear system and the cart-pole.
//! Slower than unit tests: each case trains a network from scratch.

use nalgebra::{dmatrix, dvector, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use olrl::env::{rollout, Environment, LinearEnv, PendulumEnv, PendulumParams, RolloutCounter};
use olrl::jacobians::model_jacobians;
use olrl::models::{pink_noise_sequence, train_mlp_model, DifferentiableModel, MlpConfig};

/// Held-out transitions drawn the same way the trainer draws its data.
fn heldout_transitions(
    env: &dyn Environment,
    rollouts: usize,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let spec = env.spec();
    let counter = RolloutCounter::new();
    let mut out = Vec::new();
    for _ in 0..rollouts {
        let actions =
            pink_noise_sequence(spec.horizon, spec.action_dim, noise_scale, rng).unwrap();
        let traj = rollout(env, &actions, &counter).unwrap();
        for t in 0..traj.horizon() {
            out.push((traj.states[t].clone(), traj.action(t), traj.states[t + 1].clone()));
        }
    }
    out
}

#[test]
fn trained_mlp_masters_a_linear_system() {
    let a = dmatrix![0.9, 0.15; -0.1, 0.8];
    let b = dmatrix![0.5; 1.0];
    let env = LinearEnv::new(a.clone(), b.clone(), dvector![0.5, -0.5], 20).unwrap();

    let cfg = MlpConfig {
        rollouts: 400,
        epochs: 60,
        noise_scale: 0.5,
        ..MlpConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let counter = RolloutCounter::new();
    let model = train_mlp_model(&env, &cfg, &mut rng, &counter).unwrap();
    assert_eq!(counter.count(), 400);

    // Held-out one-step MSE, pooled over dimensions and samples.
    let heldout = heldout_transitions(&env, 50, cfg.noise_scale, &mut rng);
    let mut se = 0.0;
    let mut n = 0usize;
    for (x, u, x_next) in &heldout {
        let pred = model.predict(x, u);
        se += (pred - x_next).norm_squared();
        n += x_next.len();
    }
    let mse = se / n as f64;
    assert!(mse <= 1e-4, "held-out MSE {mse}");

    // Jacobians of the trained net recover (A, B) in spectral norm at
    // held-out states; the true map is linear, so the target is constant.
    let at = a.transpose();
    let bt = b.transpose();
    let mut worst_a: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for (x, u, _) in heldout.iter().step_by(97) {
        let est = model_jacobians(&model, x, u).unwrap();
        worst_a = worst_a.max((&est.a - &at).singular_values().max());
        worst_b = worst_b.max((&est.b - &bt).singular_values().max());
    }
    assert!(worst_a <= 0.1, "worst A spectral error {worst_a}");
    assert!(worst_b <= 0.1, "worst B spectral error {worst_b}");
}

#[test]
fn trained_mlp_predicts_the_pendulum_within_the_variance_bar() {
    let env = PendulumEnv::new(PendulumParams::default(), 100).unwrap();
    let cfg = MlpConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let counter = RolloutCounter::new();
    let model = train_mlp_model(&env, &cfg, &mut rng, &counter).unwrap();
    assert_eq!(counter.count(), cfg.rollouts as u64);

    let heldout = heldout_transitions(&env, 50, cfg.noise_scale, &mut rng);
    let d = env.spec().state_dim;
    let n = heldout.len() as f64;
    let mut mean = DVector::zeros(d);
    for (_, _, x_next) in &heldout {
        mean += x_next;
    }
    mean /= n;
    let mut var = DVector::<f64>::zeros(d);
    let mut se = DVector::<f64>::zeros(d);
    for (x, u, x_next) in &heldout {
        let pred = model.predict(x, u);
        for i in 0..d {
            let c = x_next[i] - mean[i];
            var[i] += c * c;
            let e = pred[i] - x_next[i];
            se[i] += e * e;
        }
    }
    for i in 0..d {
        let std = (var[i] / n).sqrt();
        let rmse = (se[i] / n).sqrt();
        assert!(
            rmse <= 0.1 * std,
            "dimension {i}: rmse {rmse} exceeds 10% of std {std}"
        );
    }
}

#[test]
fn training_reports_divergence_instead_of_returning_garbage() {
    // A weight decay this large flips the decoupled shrink factor to a
    // huge negative multiplier: the first update explodes the weights and
    // the next batch's squared error overflows.
    let env = LinearEnv::new(dmatrix![0.9], dmatrix![1.0], dvector![1.0], 10).unwrap();
    let cfg = MlpConfig {
        rollouts: 20,
        epochs: 5,
        weight_decay: 1e300,
        noise_scale: 0.5,
        ..MlpConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let counter = RolloutCounter::new();
    let err = train_mlp_model(&env, &cfg, &mut rng, &counter).unwrap_err();
    assert!(err.to_string().contains("model training diverged"), "{err}");
}

#[test]
fn heldout_scale_sanity() {
    // The linear test's conclusions are only meaningful if held-out states
    // are O(1): check the data spread so a silent scale collapse cannot
    // make the MSE bar trivial.
    let env = LinearEnv::new(
        dmatrix![0.9, 0.15; -0.1, 0.8],
        dmatrix![0.5; 1.0],
        dvector![0.5, -0.5],
        20,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let heldout = heldout_transitions(&env, 20, 0.5, &mut rng);
    let mut sq = 0.0;
    for (_, _, x_next) in &heldout {
        sq += x_next.norm_squared() / x_next.len() as f64;
    }
    let rms = (sq / heldout.len() as f64).sqrt();
    assert!(rms > 0.2, "held-out states collapsed to {rms}");
}
