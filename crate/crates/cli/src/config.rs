use std::path::{Path, PathBuf};

use ldmsde::divergence::{EpsDistribution, PerturbTarget};
use ldmsde::regularization::TermConvention;
use ldmsde::sensitivity::SecondOrderInit;
use ldmsde::systems::{RolloutSpec, SdeSpec};
use ldmsde::worldmodel::{EvalConfig, Perturbation, ToyEnv, TrainConfig};
use ldmsde::TimeGrid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Read and parse a TOML config; every failure here is a validation error.
pub fn load<C: DeserializeOwned>(path: &Path) -> Result<C, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_end: f64,
    pub n_steps: usize,
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid, CliError> {
        TimeGrid::new(self.t_end, self.n_steps).map_err(|e| invalid(format!("grid: {e}")))
    }
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    pub system: SdeSpec,
    pub grid: GridConfig,
    #[serde(default = "one")]
    pub n_paths: usize,
    #[serde(default)]
    pub epsilon: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityKindConfig {
    Epsilon,
    InitialValue,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderInitConfig {
    #[default]
    Zero,
    UnitVector,
}

impl From<SecondOrderInitConfig> for SecondOrderInit {
    fn from(v: SecondOrderInitConfig) -> Self {
        match v {
            SecondOrderInitConfig::Zero => SecondOrderInit::Zero,
            SecondOrderInitConfig::UnitVector => SecondOrderInit::UnitVector,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    pub system: SdeSpec,
    pub grid: GridConfig,
    pub kind: SensitivityKindConfig,
    /// Second-order initial-value pairs `(i, j)`.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
    #[serde(default)]
    pub second_order_init: SecondOrderInitConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegcheckConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    pub system: SdeSpec,
    pub grid: GridConfig,
    /// Evaluation time, on the grid.
    pub t: f64,
    pub epsilons: Vec<f64>,
    pub n_paths: usize,
    #[serde(default)]
    pub convention: TermConvention,
    #[serde(default)]
    pub include_bias: bool,
    #[serde(default)]
    pub bias_half_s: bool,
    /// Epsilon at which `R` and `R~` are assembled in `report.json`.
    pub report_epsilon: f64,
}

impl RegcheckConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !e.is_finite()) {
            return Err(invalid("epsilons: need at least one finite value"));
        }
        if self.n_paths < 2 {
            return Err(invalid("n_paths: need at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QCheckConfig {
    pub deltas: Vec<f64>,
    pub action: Vec<f64>,
    pub t: f64,
    pub n_paths: usize,
}

fn gaussian() -> EpsDistribution {
    EpsDistribution::Gaussian
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    pub system: RolloutSpec,
    pub grid: GridConfig,
    #[serde(default)]
    pub target: PerturbTarget,
    #[serde(default = "gaussian")]
    pub distribution: EpsDistribution,
    pub deltas: Vec<f64>,
    pub n_paths: usize,
    #[serde(default)]
    pub q_check: Option<QCheckConfig>,
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.deltas.is_empty() || self.deltas.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(invalid("deltas: need at least one finite non-negative value"));
        }
        if self.n_paths == 0 {
            return Err(invalid("n_paths: need at least 1"));
        }
        if let EpsDistribution::Sparse { magnitude } = self.distribution {
            if let Some(d) = self.deltas.iter().find(|d| **d > magnitude) {
                return Err(invalid(format!("deltas: {d} exceeds the sparse magnitude {magnitude}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    pub env: ToyEnv,
    /// `train.seed` is replaced by the top-level seed.
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    pub env: ToyEnv,
    /// Parameter file written by `train`; its `model.json` sidecar must sit
    /// next to it.
    pub model: PathBuf,
    /// `eval.seed` is replaced by the top-level seed.
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub suite: Vec<Perturbation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: usize,
    pub env: ToyEnv,
    pub model: PathBuf,
    pub horizon: usize,
    /// Rollouts averaged into `openloop_mean.csv`; the first is also written
    /// in full.
    #[serde(default = "one")]
    pub n_rollouts: usize,
}
