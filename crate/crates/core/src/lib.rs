//! Stochastic latent-dynamics laboratory.
//!
//! Itô Euler–Maruyama integration of coupled latent dynamics models,
//! variational sensitivities, Monte Carlo estimates of the explicit
//! regularization terms induced by encoder errors, rollout divergence
//! analysis and a small trainable world model with Jacobian regularization.

pub mod divergence;
pub mod error;
pub mod field;
pub mod grid;
pub mod ldm;
pub mod sde;
pub mod regularization;
pub mod sensitivity;
pub mod stats;
pub mod systems;
pub mod worldmodel;

pub use error::{Error, Result};
pub use field::{
    check_derivatives, AffineField, CoefficientField, Field, FnField, Matrix, SumField, TanhField,
    Tensor3, Vector, ZeroField,
};
pub use grid::{derive_seed, BrownianBundle, TimeGrid};
pub use sde::{euler_maruyama, PerturbedSde, SdeSystem, Trajectory};
pub use stats::Estimate;
