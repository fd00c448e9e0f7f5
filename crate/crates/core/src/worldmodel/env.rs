use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    /// Angle from upright and angular velocity; observation
    /// `(cos theta, sin theta, omega / OMEGA_SCALE)`.
    Pendulum,
    /// Position and velocity on a line, observed directly.
    PointMass,
}

pub const OMEGA_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Physics {
    #[serde(default = "default_g")]
    pub g: f64,
    #[serde(default = "one")]
    pub length: f64,
    #[serde(default = "one")]
    pub mass: f64,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_max_action")]
    pub max_action: f64,
}

fn default_g() -> f64 {
    9.8
}
fn one() -> f64 {
    1.0
}
fn default_damping() -> f64 {
    0.1
}
fn default_dt() -> f64 {
    0.05
}
fn default_max_action() -> f64 {
    4.0
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            g: default_g(),
            length: 1.0,
            mass: 1.0,
            damping: default_damping(),
            dt: default_dt(),
            max_action: default_max_action(),
        }
    }
}

/// Deterministic toy control task. Observation perturbations apply to
/// emitted observations only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEnv {
    pub kind: EnvKind,
    #[serde(default)]
    pub physics: Physics,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    /// Standard deviation of additive Gaussian observation noise.
    #[serde(default)]
    pub obs_noise: Option<f64>,
    /// Each coordinate is zeroed independently with this probability.
    #[serde(default)]
    pub obs_mask_frac: Option<f64>,
    /// Rotation of the first two observation coordinates, in radians.
    #[serde(default)]
    pub obs_rotation: Option<f64>,
}

fn default_horizon() -> usize {
    100
}

impl ToyEnv {
    pub fn new(kind: EnvKind) -> Self {
        Self {
            kind,
            physics: Physics::default(),
            horizon: default_horizon(),
            obs_noise: None,
            obs_mask_frac: None,
            obs_rotation: None,
        }
    }

    pub fn pendulum() -> Self {
        Self::new(EnvKind::Pendulum)
    }

    pub fn point_mass() -> Self {
        Self::new(EnvKind::PointMass)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.physics;
        let positive = [("dt", p.dt), ("length", p.length), ("mass", p.mass), ("max_action", p.max_action)];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("physics.{name} must be positive, got {v}")));
            }
        }
        if !p.g.is_finite() || !p.damping.is_finite() || p.damping < 0.0 {
            return Err(Error::InvalidArgument("physics.g and physics.damping must be finite, damping >= 0".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if let Some(s) = self.obs_noise {
            if !(s >= 0.0) {
                return Err(Error::InvalidArgument(format!("obs_noise must be >= 0, got {s}")));
            }
        }
        if let Some(b) = self.obs_mask_frac {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!("obs_mask_frac must be in [0, 1], got {b}")));
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::Pendulum => 3,
            EnvKind::PointMass => 2,
        }
    }

    pub fn action_dim(&self) -> usize {
        1
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let (a, b) = match self.kind {
            EnvKind::Pendulum => (0.4, 0.5),
            EnvKind::PointMass => (1.0, 0.5),
        };
        let x = Uniform::new_inclusive(-a, a).unwrap().sample(rng);
        let v = Uniform::new_inclusive(-b, b).unwrap().sample(rng);
        Vector::from_vec(vec![x, v])
    }

    /// Semi-implicit Euler step; the action is clipped to `max_action`.
    pub fn step(&self, state: &Vector, action: f64) -> Vector {
        let p = &self.physics;
        let a = action.clamp(-p.max_action, p.max_action);
        let (x, v) = (state[0], state[1]);
        let acc = match self.kind {
            EnvKind::Pendulum => {
                p.g / p.length * x.sin() - p.damping * v + a / (p.mass * p.length * p.length)
            }
            EnvKind::PointMass => a / p.mass - p.damping * v,
        };
        let v1 = v + p.dt * acc;
        Vector::from_vec(vec![x + p.dt * v1, v1])
    }

    pub fn clean_obs(&self, state: &Vector) -> Vector {
        match self.kind {
            EnvKind::Pendulum => Vector::from_vec(vec![state[0].cos(), state[0].sin(), state[1] / OMEGA_SCALE]),
            EnvKind::PointMass => state.clone(),
        }
    }

    /// Observation with rotation, then additive noise, then masking.
    pub fn observe<R: Rng + ?Sized>(&self, state: &Vector, rng: &mut R) -> Vector {
        let mut o = self.clean_obs(state);
        if let Some(alpha) = self.obs_rotation {
            let (s, c) = alpha.sin_cos();
            let (a, b) = (o[0], o[1]);
            o[0] = c * a - s * b;
            o[1] = s * a + c * b;
        }
        if let Some(sd) = self.obs_noise.filter(|s| *s > 0.0) {
            let n = Normal::new(0.0, sd).unwrap();
            o.apply(|v| *v += n.sample(rng));
        }
        if let Some(beta) = self.obs_mask_frac.filter(|b| *b > 0.0) {
            o.apply(|v| {
                if rng.random::<f64>() < beta {
                    *v = 0.0
                }
            });
        }
        o
    }

    /// Hand-specified reward on an observation vector. For the pendulum,
    /// uprightness minus the distance to the surface `sin theta + 0.3 omega = 0`,
    /// which makes one-step greedy control stabilising.
    pub fn reward_obs(&self, obs: &Vector) -> f64 {
        match self.kind {
            EnvKind::Pendulum => {
                let s = obs[1] + 0.3 * obs[2] * OMEGA_SCALE;
                obs[0] - s * s
            }
            EnvKind::PointMass => -(obs[0] * obs[0]) - 0.1 * obs[1] * obs[1],
        }
    }

    pub fn reward(&self, state: &Vector) -> f64 {
        self.reward_obs(&self.clean_obs(state))
    }

    /// `(A, B)` with `obs' = A obs + B a` inside the action limits, for the
    /// point mass.
    pub fn linear_matrices(&self) -> Option<(Matrix, Matrix)> {
        match self.kind {
            EnvKind::Pendulum => None,
            EnvKind::PointMass => {
                let p = &self.physics;
                let k = 1.0 - p.dt * p.damping;
                let a = Matrix::from_row_slice(2, 2, &[1.0, p.dt * k, 0.0, k]);
                let b = Matrix::from_row_slice(2, 1, &[p.dt * p.dt / p.mass, p.dt / p.mass]);
                Some((a, b))
            }
        }
    }
}
