//! Named built-in test systems shared by the tests, the acceptance suite and
//! the command-line runner.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::divergence::{FnQValue, QValue, QuadraticQ, RolloutSystem};
use crate::error::{Error, Result};
use crate::field::{AffineField, Field, FnField, Matrix, Tensor3, Vector, ZeroField};
use crate::ldm::{LdmDims, LdmSystem, ObsPath};
use crate::regularization::{FnLoss, LossField, QuadraticLoss};
use crate::sde::{PerturbedSde, SdeSystem};
use crate::worldmodel::ToyEnv;

/// A perturbed system with a default start and a loss for expansion checks.
#[derive(Clone)]
pub struct SdeCase {
    pub name: &'static str,
    pub sde: PerturbedSde,
    pub x0: Vector,
    pub loss: Arc<dyn LossField>,
}

fn constant(dim_in: usize, v: f64) -> Field {
    if v == 0.0 {
        ZeroField::shared(dim_in, 1)
    } else {
        AffineField::constant(dim_in, Vector::from_element(1, v)).shared()
    }
}

fn scalar_linear_field(a: f64) -> Field {
    if a == 0.0 {
        ZeroField::shared(1, 1)
    } else {
        AffineField::linear(Matrix::from_element(1, 1, a)).shared()
    }
}

/// `dx = a x dt + b dB` with constant encoder-style errors `sigma`, `sigma_bar`.
pub fn scalar_linear(a: f64, b: f64, x0: f64, sigma: f64, sigma_bar: f64) -> Result<SdeCase> {
    let base = SdeSystem::new(scalar_linear_field(a), vec![constant(1, b)])?;
    Ok(SdeCase {
        name: "scalar-linear",
        sde: PerturbedSde::new(base, constant(1, sigma), vec![constant(1, sigma_bar)])?,
        x0: Vector::from_element(1, x0),
        loss: Arc::new(QuadraticLoss::squared_norm(1)),
    })
}

/// `dx = mu x dt + sigma x dB`.
pub fn gbm(mu: f64, sigma: f64, x0: f64) -> Result<SdeCase> {
    let base = SdeSystem::new(scalar_linear_field(mu), vec![scalar_linear_field(sigma)])?;
    Ok(SdeCase {
        name: "gbm",
        sde: PerturbedSde::unperturbed(base),
        x0: Vector::from_element(1, x0),
        loss: Arc::new(QuadraticLoss::squared_norm(1)),
    })
}

/// Exact GBM endpoint on the same Brownian path.
pub fn gbm_exact(mu: f64, sigma: f64, x0: f64, t: f64, b_t: f64) -> f64 {
    x0 * ((mu - 0.5 * sigma * sigma) * t + sigma * b_t).exp()
}

/// `dx = (-x + sin(x)/2) dt + 0.3 cos(x) dB` with drift error `0.4 cos(x)`
/// (dropped when `zero_drift`) and diffusion error `0.5 + 0.2 tanh(x)`;
/// loss `sin(x) + x^2`.
pub fn scalar_nonlinear(x0: f64, zero_drift: bool) -> Result<SdeCase> {
    let drift = FnField::scalar("drift", |x, _| -x + 0.5 * x.sin(), |x, _| -1.0 + 0.5 * x.cos(), |x, _| -0.5 * x.sin()).shared();
    let diff = FnField::scalar("diffusion", |x, _| 0.3 * x.cos(), |x, _| -0.3 * x.sin(), |x, _| -0.3 * x.cos()).shared();
    let sigma_bar = FnField::scalar(
        "sigma_bar",
        |x, _| 0.5 + 0.2 * x.tanh(),
        |x, _| 0.2 / x.cosh().powi(2),
        |x, _| -0.4 * x.tanh() / x.cosh().powi(2),
    )
    .shared();
    let sigma = if zero_drift {
        ZeroField::shared(1, 1)
    } else {
        FnField::scalar("sigma", |x, _| 0.4 * x.cos(), |x, _| -0.4 * x.sin(), |x, _| -0.4 * x.cos()).shared()
    };
    let loss = FnLoss::new(
        1,
        |x| x[0].sin() + x[0] * x[0],
        |x| Vector::from_element(1, x[0].cos() + 2.0 * x[0]),
        |x| Matrix::from_element(1, 1, 2.0 - x[0].sin()),
    );
    Ok(SdeCase {
        name: "scalar-nonlinear",
        sde: PerturbedSde::new(SdeSystem::new(drift, vec![diff])?, sigma, vec![sigma_bar])?,
        x0: Vector::from_element(1, x0),
        loss: Arc::new(loss),
    })
}

/// Hanging pendulum `(theta, omega)`: `dtheta = omega dt`,
/// `domega = (-(g/l) sin(theta) - c omega) dt + noise dB`, with constant
/// errors on the angular velocity.
pub fn pendulum_sde(g: f64, length: f64, damping: f64, noise: f64, x0: [f64; 2], sigma: f64, sigma_bar: f64) -> Result<SdeCase> {
    if !(length > 0.0) {
        return Err(Error::InvalidArgument("pendulum length must be positive".into()));
    }
    let k = g / length;
    let drift = FnField::new(
        "pendulum",
        2,
        2,
        move |x, _| Vector::from_vec(vec![x[1], -k * x[0].sin() - damping * x[1]]),
        move |x, _| Matrix::from_row_slice(2, 2, &[0.0, 1.0, -k * x[0].cos(), -damping]),
        move |x, _| {
            let mut h = Tensor3::zeros(2, 2, 2);
            h.set(1, 0, 0, k * x[0].sin());
            h
        },
    )
    .shared();
    let on_omega = |v: f64| -> Field {
        if v == 0.0 {
            ZeroField::shared(2, 2)
        } else {
            AffineField::constant(2, Vector::from_vec(vec![0.0, v])).shared()
        }
    };
    let base = SdeSystem::new(drift, vec![on_omega(noise)])?;
    Ok(SdeCase {
        name: "pendulum",
        sde: PerturbedSde::new(base, on_omega(sigma), vec![on_omega(sigma_bar)])?,
        x0: Vector::from_vec(x0.to_vec()),
        loss: Arc::new(QuadraticLoss::squared_norm(2)),
    })
}

/// Encoder-only latent dynamics with frozen recurrent state `h` and
/// observation path `s_t = sin(2t)`: `dz = tanh(0.8 h + s) dt + (0.3 + 0.2 s^2) dB`.
pub struct FrozenEncoder {
    pub system: LdmSystem,
    pub h: f64,
    pub q_enc: Field,
    pub q_enc_bar: Field,
}

impl FrozenEncoder {
    pub fn x0(&self) -> Vector {
        self.system.dims.stack(&[0.0], &[self.h], &[0.0], &[0.0])
    }

    pub fn obs(&self, t: f64) -> Vector {
        (self.system.obs)(t)
    }
}

pub fn frozen_encoder(h: f64) -> FrozenEncoder {
    let dims = LdmDims { z: 1, h: 1, z_tilde: 1, s_tilde: 1, obs: 1, action: 1 };
    let q_enc = FnField::new(
        "q_enc",
        2,
        1,
        |u, _| Vector::from_element(1, (0.8 * u[0] + u[1]).tanh()),
        |u, _| {
            let d = 1.0 - (0.8 * u[0] + u[1]).tanh().powi(2);
            Matrix::from_row_slice(1, 2, &[0.8 * d, d])
        },
        |u, _| {
            let th = (0.8 * u[0] + u[1]).tanh();
            let dd = -2.0 * th * (1.0 - th * th);
            let mut t = Tensor3::zeros(1, 2, 2);
            for (i, wi) in [0.8, 1.0].into_iter().enumerate() {
                for (j, wj) in [0.8, 1.0].into_iter().enumerate() {
                    t.set(0, i, j, dd * wi * wj);
                }
            }
            t
        },
    )
    .shared();
    let q_enc_bar = FnField::new(
        "q_enc_bar",
        2,
        1,
        |u, _| Vector::from_element(1, 0.3 + 0.2 * u[1] * u[1]),
        |u, _| Matrix::from_row_slice(1, 2, &[0.0, 0.4 * u[1]]),
        |_, _| {
            let mut t = Tensor3::zeros(1, 2, 2);
            t.set(0, 1, 1, 0.4);
            t
        },
    )
    .shared();
    let obs: ObsPath = Arc::new(|t| Vector::from_element(1, (2.0 * t).sin()));
    let system = LdmSystem {
        dims,
        enc_drift: q_enc.clone(),
        enc_diff: q_enc_bar.clone(),
        seq_drift: ZeroField::shared(3, 1),
        seq_diff: ZeroField::shared(3, 1),
        pred_drift: ZeroField::shared(1, 1),
        pred_diff: ZeroField::shared(1, 1),
        dec_drift: ZeroField::shared(2, 1),
        dec_diff: ZeroField::shared(2, 1),
        policy: ZeroField::shared(2, 1),
        obs,
    };
    FrozenEncoder { system, h, q_enc, q_enc_bar }
}

/// Linear sequence drift over `(h, z~, a)`, linear predictor with affine
/// diffusion `0.1 h_0 + p_bar`, tracking value function with policy
/// `a = -0.5 h_0 + 0.2 h_1 - 0.3 z~`.
pub fn linear_quadratic_rollout(p_bar: f64) -> RolloutSystem {
    let f = AffineField::linear(Matrix::from_row_slice(2, 4, &[
        -0.8, 0.1, 0.3, 0.2,
        0.05, -0.5, -0.2, 0.1,
    ]))
    .shared();
    let p = AffineField::linear(Matrix::from_row_slice(1, 2, &[0.4, -0.3])).shared();
    let pb = AffineField::new(Matrix::from_row_slice(1, 2, &[0.1, 0.0]), Vector::from_element(1, p_bar)).shared();
    let q = QuadraticQ::tracking(
        &Matrix::from_row_slice(1, 2, &[-0.5, 0.2]),
        &Matrix::from_row_slice(1, 1, &[-0.3]),
        1.0,
        None,
    )
    .shared();
    RolloutSystem::new(f, p, pb, q).expect("consistent linear-quadratic dimensions")
}

/// Scalar `h`, `z~`, `a` with closed-loop matrix `[[-1.1, 0.2], [-0.2, 0]]`
/// (negative semidefinite symmetric part) and constant diffusion `p_bar`.
pub fn scalar_contraction(p_bar: f64) -> RolloutSystem {
    let f = AffineField::linear(Matrix::from_row_slice(1, 3, &[-1.0, 0.3, 0.2])).shared();
    let p = AffineField::linear(Matrix::from_row_slice(1, 1, &[-0.2])).shared();
    let pb = if p_bar == 0.0 {
        ZeroField::shared(1, 1)
    } else {
        AffineField::constant(1, Vector::from_element(1, p_bar)).shared()
    };
    let q = QuadraticQ::tracking(
        &Matrix::from_row_slice(1, 1, &[-0.5]),
        &Matrix::from_row_slice(1, 1, &[-0.5]),
        1.0,
        None,
    )
    .shared();
    RolloutSystem::new(f, p, pb, q).expect("consistent contraction dimensions")
}

/// `Q(h, z, a) = -a^4/4 - a^2 + a sin(h) + a z^2/2 - h^2`, strictly concave in `a`.
pub fn smooth_q() -> FnQValue {
    FnQValue::new(
        (1, 1, 1),
        |u| {
            let (h, z, a) = (u[0], u[1], u[2]);
            -a.powi(4) / 4.0 - a * a + a * h.sin() + a * z * z / 2.0 - h * h
        },
        |u| {
            let (h, z, a) = (u[0], u[1], u[2]);
            Vector::from_vec(vec![
                a * h.cos() - 2.0 * h,
                a * z,
                -a.powi(3) - 2.0 * a + h.sin() + z * z / 2.0,
            ])
        },
        |u| {
            let (h, z, a) = (u[0], u[1], u[2]);
            Matrix::from_row_slice(3, 3, &[
                -a * h.sin() - 2.0, 0.0, h.cos(),
                0.0, a, z,
                h.cos(), z, -3.0 * a * a - 2.0,
            ])
        },
    )
    .with_third(|u| {
        let (h, a) = (u[0], u[2]);
        let mut t = Tensor3::zeros(3, 3, 3);
        let mut sym = |i: usize, j: usize, k: usize, v: f64| {
            for (p, q, r) in [(i, j, k), (i, k, j), (j, i, k), (j, k, i), (k, i, j), (k, j, i)] {
                t.set(p, q, r, v);
            }
        };
        sym(0, 0, 0, -a * h.cos());
        sym(0, 0, 2, -h.sin());
        sym(1, 1, 2, 1.0);
        sym(2, 2, 2, -6.0 * a);
        t
    })
}

/// Nonlinear rollout with the smooth value function:
/// `f = -h + 0.4 tanh(z~) + 0.3 a - 0.1 h^3`, `p = 0.3 sin(h)`,
/// `p_bar = p_bar0 + 0.05 cos(h)`.
pub fn smooth_rollout(p_bar0: f64) -> RolloutSystem {
    let f = FnField::new(
        "smooth_sequence",
        3,
        1,
        |u, _| Vector::from_element(1, -u[0] + 0.4 * u[1].tanh() + 0.3 * u[2] - 0.1 * u[0].powi(3)),
        |u, _| {
            let s = 1.0 - u[1].tanh().powi(2);
            Matrix::from_row_slice(1, 3, &[-1.0 - 0.3 * u[0] * u[0], 0.4 * s, 0.3])
        },
        |u, _| {
            let th = u[1].tanh();
            let mut t = Tensor3::zeros(1, 3, 3);
            t.set(0, 0, 0, -0.6 * u[0]);
            t.set(0, 1, 1, -0.8 * th * (1.0 - th * th));
            t
        },
    )
    .shared();
    let p = FnField::scalar("smooth_predictor", |h, _| 0.3 * h.sin(), |h, _| 0.3 * h.cos(), |h, _| -0.3 * h.sin()).shared();
    let pb = FnField::scalar(
        "smooth_predictor_diffusion",
        move |h, _| p_bar0 + 0.05 * h.cos(),
        |h, _| -0.05 * h.sin(),
        |h, _| -0.05 * h.cos(),
    )
    .shared();
    let q: Arc<dyn QValue> = smooth_q().shared();
    RolloutSystem::new(f, p, pb, q).expect("consistent smooth rollout dimensions")
}

/// The pendulum control task used by the world-model experiments.
pub fn pendulum_env() -> ToyEnv {
    ToyEnv::pendulum()
}

/// Configurable entry of the SDE registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SdeSpec {
    ScalarLinear {
        #[serde(default = "one")]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default = "one")]
        x0: f64,
        #[serde(default)]
        sigma: f64,
        #[serde(default)]
        sigma_bar: f64,
    },
    ScalarNonlinear {
        #[serde(default = "half")]
        x0: f64,
        #[serde(default)]
        zero_drift: bool,
    },
    Gbm {
        #[serde(default = "gbm_mu")]
        mu: f64,
        #[serde(default = "gbm_sigma")]
        sigma: f64,
        #[serde(default = "one")]
        x0: f64,
    },
    Pendulum {
        #[serde(default = "gravity")]
        g: f64,
        #[serde(default = "one")]
        length: f64,
        #[serde(default = "pendulum_damping")]
        damping: f64,
        #[serde(default = "pendulum_noise")]
        noise: f64,
        #[serde(default = "pendulum_x0")]
        x0: [f64; 2],
        #[serde(default)]
        sigma: f64,
        #[serde(default = "pendulum_noise")]
        sigma_bar: f64,
    },
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn gbm_mu() -> f64 {
    0.05
}
fn gbm_sigma() -> f64 {
    0.2
}
fn gravity() -> f64 {
    9.8
}
fn pendulum_damping() -> f64 {
    0.1
}
fn pendulum_noise() -> f64 {
    0.1
}
fn pendulum_x0() -> [f64; 2] {
    [0.5, 0.0]
}

impl SdeSpec {
    pub fn build(&self) -> Result<SdeCase> {
        match *self {
            SdeSpec::ScalarLinear { a, b, x0, sigma, sigma_bar } => scalar_linear(a, b, x0, sigma, sigma_bar),
            SdeSpec::ScalarNonlinear { x0, zero_drift } => scalar_nonlinear(x0, zero_drift),
            SdeSpec::Gbm { mu, sigma, x0 } => gbm(mu, sigma, x0),
            SdeSpec::Pendulum { g, length, damping, noise, x0, sigma, sigma_bar } => {
                pendulum_sde(g, length, damping, noise, x0, sigma, sigma_bar)
            }
        }
    }
}

/// Configurable entry of the rollout registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RolloutSpec {
    LinearQuadratic {
        #[serde(default = "lq_p_bar")]
        p_bar: f64,
        #[serde(default = "lq_h0")]
        h0: [f64; 2],
        #[serde(default = "lq_z0")]
        z0: f64,
    },
    ScalarContraction {
        #[serde(default = "lq_p_bar")]
        p_bar: f64,
        #[serde(default = "half")]
        h0: f64,
        #[serde(default = "lq_z0")]
        z0: f64,
    },
    SmoothNonlinear {
        #[serde(default = "pendulum_noise")]
        p_bar: f64,
        #[serde(default = "lq_z0")]
        h0: f64,
        #[serde(default = "half")]
        z0: f64,
    },
}

fn lq_p_bar() -> f64 {
    0.2
}
fn lq_h0() -> [f64; 2] {
    [0.5, -0.2]
}
fn lq_z0() -> f64 {
    0.3
}

impl RolloutSpec {
    /// System with its initial `(h_0, z~_0)`.
    pub fn build(&self) -> (RolloutSystem, Vector, Vector) {
        match *self {
            RolloutSpec::LinearQuadratic { p_bar, h0, z0 } => (
                linear_quadratic_rollout(p_bar),
                Vector::from_vec(h0.to_vec()),
                Vector::from_element(1, z0),
            ),
            RolloutSpec::ScalarContraction { p_bar, h0, z0 } => (
                scalar_contraction(p_bar),
                Vector::from_element(1, h0),
                Vector::from_element(1, z0),
            ),
            RolloutSpec::SmoothNonlinear { p_bar, h0, z0 } => (
                smooth_rollout(p_bar),
                Vector::from_element(1, h0),
                Vector::from_element(1, z0),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::policy_derivatives;
    use crate::field::check_derivatives;

    #[test]
    fn registered_fields_have_consistent_derivatives() {
        let cases = [
            scalar_nonlinear(0.5, false).unwrap(),
            pendulum_sde(9.8, 1.0, 0.1, 0.1, [0.5, 0.0], 0.2, 0.1).unwrap(),
        ];
        for c in &cases {
            let x = c.x0.map(|v| v + 0.3);
            let mut fields = vec![c.sde.base.drift.clone(), c.sde.drift_error.clone()];
            fields.extend(c.sde.base.diffusions.iter().cloned());
            fields.extend(c.sde.diffusion_errors.iter().cloned());
            for f in fields {
                let r = check_derivatives(f.as_ref(), &x, 0.0, 1e-4);
                assert!(r.jacobian_error < 1e-7 && r.hessian_error < 1e-6, "{}: {r:?}", c.name);
            }
        }
        let s = smooth_rollout(0.1);
        let u = Vector::from_vec(vec![0.4, -0.7, 0.2]);
        let r = check_derivatives(s.f.as_ref(), &u, 0.0, 1e-4);
        assert!(r.jacobian_error < 1e-7 && r.hessian_error < 1e-6, "{r:?}");
        let enc = frozen_encoder(0.3);
        let r = check_derivatives(enc.q_enc.as_ref(), &Vector::from_vec(vec![0.3, 0.6]), 0.0, 1e-4);
        assert!(r.jacobian_error < 1e-7 && r.hessian_error < 1e-6, "{r:?}");
    }

    #[test]
    fn smooth_q_has_a_unique_interior_argmax() {
        let q = smooth_q();
        let d = policy_derivatives(&q, &[0.3], &[0.5], &Vector::zeros(1), true).unwrap();
        // a^3 + 2a = sin(h) + z^2/2
        let a = d.rho[0];
        assert!((a.powi(3) + 2.0 * a - 0.3f64.sin() - 0.125).abs() < 1e-12);
    }

    #[test]
    fn specs_parse_with_defaults_and_reject_unknown_keys() {
        let s: SdeSpec = toml_like(r#"{"name": "gbm"}"#);
        assert_eq!(s, SdeSpec::Gbm { mu: 0.05, sigma: 0.2, x0: 1.0 });
        assert!(serde_json::from_str::<SdeSpec>(r#"{"name": "gbm", "drift": 1}"#).is_err());
        assert!(serde_json::from_str::<RolloutSpec>(r#"{"name": "linear-quadratic", "pbar": 1}"#).is_err());
        let (sys, h0, z0) = RolloutSpec::ScalarContraction { p_bar: 0.2, h0: 0.5, z0: 0.3 }.build();
        assert_eq!((sys.dim_h, h0.len(), z0.len()), (1, 1, 1));
    }

    fn toml_like<T: serde::de::DeserializeOwned>(s: &str) -> T {
        serde_json::from_str(s).unwrap()
    }
}
