//! Small trainable discrete-time latent dynamics model on a toy control
//! task, Jacobian-regularised training and a robustness harness.

pub mod env;
pub mod eval;
pub mod io;
pub mod mlp;
pub mod model;
pub mod train;

pub use env::{EnvKind, Physics, ToyEnv};
pub use eval::{
    evaluate_robustness, greedy_action, rollout_openloop, run_episode, EvalConfig, OpenLoopRollout, Perturbation,
    RobustnessReport, RobustnessRow,
};
pub use io::{read_params, write_params};
pub use mlp::{Activation, Dense, Mlp};
pub use model::{
    jacobian_penalty, network_penalty, penalty_samples, EncodeNoise, LdmModel, LossEval, LossWeights, ModelDims, Sequence,
    LOGVAR_MAX, LOGVAR_MIN,
};
pub use train::{collect_dataset, train, train_on, ErrorInjection, TrainConfig, TrainLog, TrainRow};
