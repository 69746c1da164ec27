//! Learning open-loop action sequences with costate-based gradients.
//!
//! The crate revolves around a single idea: for a deterministic environment
//! with known reward functions, the gradient of the total return with
//! respect to every action in a sequence can be assembled from one forward
//! rollout plus a backward sweep of costate vectors, where the only unknown
//! quantities are the dynamics Jacobians along the visited trajectory.
//! Everything else here supplies those Jacobians in different ways (exact
//! probes, learned models, trajectory fits, recursive least squares),
//! drives the resulting gradient ascent, or checks the estimates against
//! the bounds that guarantee ascent makes progress.
//!
//! Module map:
//! - [`env`]: environment contract, rollouts, cart-pole swing-up, LQR.
//! - [`pontryagin`]: backward costate sweep and exact gradients.
//! - [`jacobians`]: Jacobian estimators (probes, fits, recursive updates).
//! - [`models`]: differentiable dynamics models (perturbed physics, MLP)
//!   and the exploration-noise generators used to train them.
//! - [`optim`]: plain and Adam updates on whole action sequences.
//! - [`algorithms`]: the gradient learners and derivative-free baselines.
//! - [`theory`]: estimate-quality bounds and convergence-rate checks.

pub mod algorithms;
pub mod env;
mod error;
pub mod jacobians;
pub mod models;
pub mod optim;
pub mod pontryagin;
pub mod theory;

pub use error::{Error, Result};
