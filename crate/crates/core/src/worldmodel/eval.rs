use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Vector;
use crate::grid::derive_seed;
use crate::stats::{ensemble, Estimate};

use super::env::ToyEnv;
use super::model::LdmModel;
use super::train::ErrorInjection;

/// One setting of the robustness suite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Perturbation {
    ObsNoise { std: f64 },
    Rotation { angle: f64 },
    Mask { frac: f64 },
    Gravity { g: f64 },
    EncoderError { injection: ErrorInjection },
}

impl Perturbation {
    pub fn label(&self) -> String {
        match self {
            Perturbation::ObsNoise { std } => format!("obs_noise={std}"),
            Perturbation::Rotation { angle } => format!("rotation={angle}"),
            Perturbation::Mask { frac } => format!("mask={frac}"),
            Perturbation::Gravity { g } => format!("gravity={g}"),
            Perturbation::EncoderError { injection: ErrorInjection::ZeroDrift { variance } } => {
                format!("encoder_zero_drift={variance}")
            }
            Perturbation::EncoderError { injection: ErrorInjection::NonzeroDrift { mu_range, var_range } } => {
                format!(
                    "encoder_nonzero_drift=mu[{},{}]var[{},{}]",
                    mu_range[0], mu_range[1], var_range[0], var_range[1]
                )
            }
        }
    }

    /// Environment with the perturbation applied, and the encoder error if any.
    fn apply(&self, env: &ToyEnv) -> (ToyEnv, Option<ErrorInjection>) {
        let mut e = env.clone();
        let mut inj = None;
        match *self {
            Perturbation::ObsNoise { std } => e.obs_noise = Some(std),
            Perturbation::Rotation { angle } => e.obs_rotation = Some(angle),
            Perturbation::Mask { frac } => e.obs_mask_frac = Some(frac),
            Perturbation::Gravity { g } => e.physics.g = g,
            Perturbation::EncoderError { injection } => inj = Some(injection),
        }
        (e, inj)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    /// Points of the uniform action grid searched at each step.
    pub n_actions: usize,
    /// Horizon of the open-loop error column.
    pub openloop_horizon: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_episodes: 16, n_actions: 9, openloop_horizon: 25, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RobustnessRow {
    pub mean_return: Estimate,
    /// Clean mean return minus this setting's mean return.
    pub degradation: f64,
    /// Mean per-step squared error of open-loop decoded predictions.
    pub openloop_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RobustnessReport {
    /// Keyed by setting label; `clean` is always present.
    pub settings: BTreeMap<String, RobustnessRow>,
    pub n_episodes: usize,
    pub seed: u64,
}

impl RobustnessReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn clean(&self) -> &RobustnessRow {
        &self.settings["clean"]
    }
}

/// Greedy one-step action: the grid action whose predicted next decoded
/// observation has the highest reward. Returns the action and next `h`.
pub fn greedy_action(model: &LdmModel, env: &ToyEnv, h: &Vector, z: &Vector, n_actions: usize) -> (f64, Vector) {
    let max = env.physics.max_action;
    let mut best = (f64::NEG_INFINITY, 0.0, h.clone());
    for k in 0..n_actions.max(1) {
        let a = if n_actions <= 1 { 0.0 } else { -max + 2.0 * max * k as f64 / (n_actions - 1) as f64 };
        let hn = model.step(h, z, &Vector::from_element(1, a));
        let (zm, _) = model.predict(&hn);
        let value = env.reward_obs(&model.decode(&hn, &zm));
        if value > best.0 {
            best = (value, a, hn);
        }
    }
    (best.1, best.2)
}

/// Closed-loop episode return. The encoder mean is used, plus the injected
/// error when given; observations and injections draw from separate streams.
pub fn run_episode(
    model: &LdmModel,
    env: &ToyEnv,
    injection: Option<&ErrorInjection>,
    n_actions: usize,
    seed: u64,
) -> f64 {
    let mut start = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut obs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut inj_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    let mut state = env.initial_state(&mut start);
    let mut h = Vector::zeros(model.dims.h);
    let mut ret = 0.0;
    for _ in 0..env.horizon {
        let obs = env.observe(&state, &mut obs_rng);
        let (mut z, _) = model.encode(&h, &obs);
        if let Some(inj) = injection {
            z += inj.sample(model.dims.z, &mut inj_rng);
        }
        let (a, hn) = greedy_action(model, env, &h, &z, n_actions);
        state = env.step(&state, a);
        ret += env.reward(&state);
        h = hn;
    }
    ret
}

/// Clean row plus one row per setting; every setting reuses the same
/// episode seeds.
pub fn evaluate_robustness(
    model: &LdmModel,
    env: &ToyEnv,
    suite: &[Perturbation],
    config: &EvalConfig,
) -> Result<RobustnessReport> {
    env.validate()?;
    if config.n_episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut settings = BTreeMap::new();
    let mut cases: Vec<(String, ToyEnv, Option<ErrorInjection>)> = vec![("clean".into(), env.clone(), None)];
    for p in suite {
        let (e, inj) = p.apply(env);
        e.validate()?;
        if let Some(i) = &inj {
            i.validate()?;
        }
        cases.push((p.label(), e, inj));
    }
    let mut clean_mean = 0.0;
    for (k, (label, e, inj)) in cases.iter().enumerate() {
        let returns = ensemble(config.n_episodes, config.seed, |_, s| {
            Ok(run_episode(model, e, inj.as_ref(), config.n_actions, s))
        })?;
        let mean_return = Estimate::from_samples(&returns);
        if k == 0 {
            clean_mean = mean_return.mean;
        }
        let ol = ensemble(config.n_episodes, derive_seed(config.seed, 7), |_, s| {
            let r = rollout_openloop(model, e, config.openloop_horizon, s)?;
            Ok(r.divergence.iter().sum::<f64>() / r.divergence.len() as f64)
        })?;
        settings.insert(
            label.clone(),
            RobustnessRow {
                mean_return,
                degradation: clean_mean - mean_return.mean,
                openloop_error: ol.iter().sum::<f64>() / ol.len() as f64,
            },
        );
    }
    Ok(RobustnessReport { settings, n_episodes: config.n_episodes, seed: config.seed })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopRollout {
    /// Decoded predictions for steps `1..=horizon`.
    pub predicted: Vec<Vector>,
    /// Clean observations for the same steps.
    pub truth: Vec<Vector>,
    pub divergence: Vec<f64>,
}

impl OpenLoopRollout {
    pub fn to_csv(&self) -> String {
        let d = self.predicted.first().map_or(0, |v| v.len());
        let mut s = String::from("step");
        for i in 0..d {
            s.push_str(&format!(",pred_{i}"));
        }
        for i in 0..d {
            s.push_str(&format!(",true_{i}"));
        }
        s.push_str(",divergence\n");
        for (k, ((p, t), dv)) in self.predicted.iter().zip(&self.truth).zip(&self.divergence).enumerate() {
            s.push_str(&(k + 1).to_string());
            for v in p.iter().chain(t.iter()) {
                s.push_str(&format!(",{v}"));
            }
            s.push_str(&format!(",{dv}\n"));
        }
        s
    }
}

/// Encode the first (possibly perturbed) observation once, then roll the
/// sequence cell and predictor forward under random actions with no further
/// observations.
pub fn rollout_openloop(model: &LdmModel, env: &ToyEnv, horizon: usize, seed: u64) -> Result<OpenLoopRollout> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let mut obs_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let max = env.physics.max_action;
    let act = Uniform::new_inclusive(-max, max).unwrap();
    let mut state = env.initial_state(&mut rng);
    let mut h = Vector::zeros(model.dims.h);
    let (mut z, _) = model.encode(&h, &env.observe(&state, &mut obs_rng));
    let mut out = OpenLoopRollout { predicted: Vec::new(), truth: Vec::new(), divergence: Vec::new() };
    for _ in 0..horizon {
        let a = act.sample(&mut rng);
        h = model.step(&h, &z, &Vector::from_element(1, a));
        z = model.predict(&h).0;
        let pred = model.decode(&h, &z);
        state = env.step(&state, a);
        let truth = env.clean_obs(&state);
        out.divergence.push((&pred - &truth).norm_squared());
        out.predicted.push(pred);
        out.truth.push(truth);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Matrix;
    use crate::worldmodel::mlp::{Activation, Dense, Mlp};
    use crate::worldmodel::model::ModelDims;

    fn dense(w: Matrix) -> Mlp {
        let b = Vector::zeros(w.nrows());
        Mlp::from_layers(vec![Dense { w, b, act: Activation::Identity }])
    }

    /// `z = s`, `h' = A z + B a`, `z~ = h`, `s^ = z`.
    fn linear_model(env: &ToyEnv) -> LdmModel {
        let (a, b) = env.linear_matrices().unwrap();
        let dims = ModelDims { obs: 2, action: 1, z: 2, h: 2, hidden: 0 };
        let mut enc = Matrix::zeros(4, 4);
        enc[(0, 2)] = 1.0;
        enc[(1, 3)] = 1.0;
        let mut seq = Matrix::zeros(2, 5);
        seq.view_mut((0, 2), (2, 2)).copy_from(&a);
        seq.view_mut((0, 4), (2, 1)).copy_from(&b);
        let mut pred = Matrix::zeros(4, 2);
        pred[(0, 0)] = 1.0;
        pred[(1, 1)] = 1.0;
        let mut dec = Matrix::zeros(2, 4);
        dec[(0, 2)] = 1.0;
        dec[(1, 3)] = 1.0;
        LdmModel::from_parts(dims, dense(enc), dense(seq), dense(pred), dense(dec)).unwrap()
    }

    #[test]
    fn linear_model_predicts_one_step_exactly() {
        let env = ToyEnv::point_mass();
        let model = linear_model(&env);
        let r = rollout_openloop(&model, &env, 1, 3).unwrap();
        assert!(r.divergence[0] < 1e-6);
        assert!(r.divergence[0] < 1e-25);
    }

    #[test]
    fn openloop_is_reproducible() {
        let env = ToyEnv::pendulum();
        let model = LdmModel::new(ModelDims { obs: 3, action: 1, z: 2, h: 4, hidden: 8 }, 1);
        assert_eq!(rollout_openloop(&model, &env, 20, 5).unwrap(), rollout_openloop(&model, &env, 20, 5).unwrap());
        assert!(rollout_openloop(&model, &env, 0, 5).is_err());
    }

    #[test]
    fn empty_suite_reports_only_clean() {
        let env = ToyEnv { horizon: 10, ..ToyEnv::pendulum() };
        let model = LdmModel::new(ModelDims { obs: 3, action: 1, z: 2, h: 4, hidden: 8 }, 1);
        let cfg = EvalConfig { n_episodes: 3, ..EvalConfig::default() };
        let r = evaluate_robustness(&model, &env, &[], &cfg).unwrap();
        assert_eq!(r.settings.len(), 1);
        assert_eq!(r.clean().degradation, 0.0);
        let j = r.to_json().unwrap();
        assert!(j.contains("\"clean\""));
    }

    #[test]
    fn suite_labels_are_distinct() {
        let suite = [
            Perturbation::ObsNoise { std: 0.3 },
            Perturbation::Rotation { angle: 0.5 },
            Perturbation::Mask { frac: 0.25 },
            Perturbation::Gravity { g: 1.0 },
            Perturbation::EncoderError { injection: ErrorInjection::ZeroDrift { variance: 0.5 } },
            Perturbation::EncoderError {
                injection: ErrorInjection::NonzeroDrift { mu_range: [0.0, 5.0], var_range: [0.0, 5.0] },
            },
        ];
        let env = ToyEnv { horizon: 5, ..ToyEnv::pendulum() };
        let model = LdmModel::new(ModelDims { obs: 3, action: 1, z: 2, h: 4, hidden: 8 }, 1);
        let cfg = EvalConfig { n_episodes: 2, ..EvalConfig::default() };
        let r = evaluate_robustness(&model, &env, &suite, &cfg).unwrap();
        assert_eq!(r.settings.len(), 7);
    }
}
