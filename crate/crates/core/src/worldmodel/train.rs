use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Vector;
use crate::grid::derive_seed;
use crate::sde::fmt_f64;

use super::env::ToyEnv;
use super::model::{network_penalty, LdmModel, LossWeights, ModelDims, Sequence};

pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Additive encoder error `z += mu + sigma xi`, redrawn at every encode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorInjection {
    /// `mu = 0`, fixed variance.
    ZeroDrift { variance: f64 },
    /// `mu ~ U[mu_range]`, `sigma^2 ~ U[var_range]`.
    NonzeroDrift { mu_range: [f64; 2], var_range: [f64; 2] },
}

impl ErrorInjection {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ErrorInjection::ZeroDrift { variance } => variance >= 0.0 && variance.is_finite(),
            ErrorInjection::NonzeroDrift { mu_range, var_range } => {
                mu_range[0] <= mu_range[1]
                    && var_range[0] <= var_range[1]
                    && var_range[0] >= 0.0
                    && mu_range.iter().chain(&var_range).all(|v| v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid error injection {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vector {
        let (mu, var) = match *self {
            ErrorInjection::ZeroDrift { variance } => (0.0, variance),
            ErrorInjection::NonzeroDrift { mu_range, var_range } => (
                Uniform::new_inclusive(mu_range[0], mu_range[1]).unwrap().sample(rng),
                Uniform::new_inclusive(var_range[0], var_range[1]).unwrap().sample(rng),
            ),
        };
        let sd = var.sqrt();
        Vector::from_fn(dim, |_, _| {
            let g: f64 = StandardNormal.sample(rng);
            mu + sd * g
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub n_projections: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub steps: usize,
    pub seq_len: usize,
    pub n_episodes: usize,
    pub seed: u64,
    pub z_dim: usize,
    pub h_dim: usize,
    pub hidden: usize,
    pub error_injection: Option<ErrorInjection>,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
    /// Also penalise the encoder's input-output Jacobian.
    pub penalize_encoder: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            n_projections: 1,
            lr: 0.005,
            momentum: 0.9,
            batch: 8,
            steps: 5000,
            seq_len: 16,
            n_episodes: 128,
            seed: 0,
            z_dim: 2,
            h_dim: 6,
            hidden: 16,
            error_injection: None,
            grad_clip: Some(5.0),
            penalize_encoder: false,
            loss_weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        if self.n_projections == 0 {
            return bad("n_projections must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch == 0 || self.seq_len == 0 || self.n_episodes == 0 {
            return bad("batch, seq_len and n_episodes must be at least 1".into());
        }
        if self.z_dim == 0 || self.h_dim == 0 || self.hidden == 0 {
            return bad("z_dim, h_dim and hidden must be at least 1".into());
        }
        let lw = self.loss_weights;
        if [lw.prior_recon, lw.posterior_entropy].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return bad(format!("loss weights must be finite and >= 0, got {lw:?}"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        if let Some(e) = &self.error_injection {
            e.validate()?;
        }
        Ok(())
    }

    pub fn dims(&self, env: &ToyEnv) -> ModelDims {
        ModelDims {
            obs: env.obs_dim(),
            action: env.action_dim(),
            z: self.z_dim,
            h: self.h_dim,
            hidden: self.hidden,
        }
    }
}

/// Episodes of `len` steps under uniformly random actions.
pub fn collect_dataset(env: &ToyEnv, n_episodes: usize, len: usize, seed: u64) -> Vec<Sequence> {
    let max = env.physics.max_action;
    let act = Uniform::new_inclusive(-max, max).unwrap();
    (0..n_episodes)
        .map(|e| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, e as u64));
            let mut state = env.initial_state(&mut rng);
            let mut obs = vec![env.observe(&state, &mut rng)];
            let mut actions = Vec::with_capacity(len);
            for _ in 0..len {
                let a = act.sample(&mut rng);
                state = env.step(&state, a);
                obs.push(env.observe(&state, &mut rng));
                actions.push(Vector::from_element(1, a));
            }
            Sequence { obs, actions }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRow {
    pub step: usize,
    pub loss: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<TrainRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,penalty,total\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.step, fmt_f64(r.loss), fmt_f64(r.penalty), fmt_f64(r.total)));
        }
        s
    }
}

/// Momentum gradient descent on the dynamics loss plus `lambda` times the
/// random-projection Jacobian norm of the sequence cell. The penalty is
/// evaluated at the cell inputs the batch visits, held fixed.
pub fn train(env: &ToyEnv, config: &TrainConfig) -> Result<(LdmModel, TrainLog)> {
    env.validate()?;
    config.validate()?;
    let data = collect_dataset(env, config.n_episodes, config.seq_len, derive_seed(config.seed, 1));
    let model = LdmModel::new(config.dims(env), derive_seed(config.seed, 0));
    train_on(model, &data, config)
}

/// [`train`] from a given initial model and dataset.
pub fn train_on(mut model: LdmModel, data: &[Sequence], config: &TrainConfig) -> Result<(LdmModel, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sequence".into()));
    }
    let nz = model.dims.z;
    let mut theta = model.params();
    let mut vel = vec![0.0; theta.len()];
    let mut log = TrainLog::default();
    let step_seeds = derive_seed(config.seed, 2);
    let seq_range = model.sequence_range();
    let enc_range = model.encoder_range();
    for step in 0..config.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seeds, step as u64));
        let idx: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..data.len())).collect();
        let batch: Vec<Sequence> = idx.iter().map(|&i| data[i].clone()).collect();
        let noise: Vec<_> = batch
            .iter()
            .map(|s| {
                let mut n = model.sample_noise(s.obs.len(), rng.next_u64());
                if let Some(inj) = &config.error_injection {
                    for o in &mut n.offset {
                        *o = inj.sample(nz, &mut rng);
                    }
                }
                n
            })
            .collect();
        let ev = model.loss_and_grad(&batch, &noise, config.loss_weights)?;
        let mut grad = ev.grad;
        let mut penalty = 0.0;
        if config.lambda > 0.0 {
            let pseed = rng.next_u64();
            let mut g = model.sequence.zeros_like();
            penalty += network_penalty(&model.sequence, &ev.cell_inputs, config.n_projections, pseed, Some(&mut g));
            let mut flat = Vec::new();
            g.write_params(&mut flat);
            for (k, v) in seq_range.clone().zip(flat) {
                grad[k] += config.lambda * v;
            }
            if config.penalize_encoder {
                let mut g = model.encoder.zeros_like();
                penalty += network_penalty(&model.encoder, &ev.encoder_inputs, config.n_projections, rng.next_u64(), Some(&mut g));
                let mut flat = Vec::new();
                g.write_params(&mut flat);
                for (k, v) in enc_range.clone().zip(flat) {
                    grad[k] += config.lambda * v;
                }
            }
        }
        let total = ev.loss + config.lambda * penalty;
        if !total.is_finite() || total.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergent { step, loss: total });
        }
        log.rows.push(TrainRow { step, loss: ev.loss, penalty, total });
        if let Some(c) = config.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for k in 0..theta.len() {
            vel[k] = config.momentum * vel[k] - config.lr * grad[k];
            theta[k] += vel[k];
        }
        model.set_params(&theta)?;
    }
    Ok((model, log))
}
