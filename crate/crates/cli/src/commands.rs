use std::path::{Path, PathBuf};

use ldmsde::divergence::{divergence_scan, estimate_term_catalog, q_expansion_check, RolloutProblem};
use ldmsde::regularization::{estimate_regularizer, taylor_residual_scan, RegOptions, RegProblem, ResidualVariant};
use ldmsde::sensitivity::{
    integrate_epsilon_sensitivities, integrate_fundamental_matrix, integrate_initial_value_sensitivities, integrate_xi,
    solution_formula_check,
};
use ldmsde::stats::{ensemble, Estimate};
use ldmsde::worldmodel::{evaluate_robustness, rollout_openloop, train, write_params, LdmModel, ModelDims, ToyEnv};
use ldmsde::{derive_seed, BrownianBundle, TimeGrid, Vector};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::artifacts::Run;
use crate::config::{self, *};
use crate::CliError;

pub struct Invocation {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: PathBuf,
}

fn runtime(e: ldmsde::Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(what: &str, e: ldmsde::Error) -> CliError {
    CliError::Config(format!("{what}: {e}"))
}

fn set_workers(n: usize) -> Result<(), CliError> {
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    }
    Ok(())
}

fn bundle(grid: TimeGrid, m: usize, seed: u64) -> ldmsde::Result<BrownianBundle> {
    if m == 0 {
        Ok(BrownianBundle::deterministic(grid))
    } else {
        BrownianBundle::generate(grid, m, seed)
    }
}

fn estimates_json(es: &[Estimate]) -> serde_json::Value {
    json!({
        "mean": es.iter().map(|e| e.mean).collect::<Vec<_>>(),
        "stderr": es.iter().map(|e| e.stderr).collect::<Vec<_>>(),
    })
}

pub fn simulate(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: SimulateConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    let case = cfg.system.build().map_err(|e| invalid("system", e))?;
    let grid = cfg.grid.build()?;
    if cfg.n_paths == 0 {
        return Err(CliError::Config("n_paths: need at least 1".into()));
    }
    set_workers(cfg.workers)?;
    let m = case.sde.n_noise();
    let first = case
        .sde
        .integrate(&case.x0, cfg.epsilon, &bundle(grid, m, derive_seed(cfg.seed, 0)).map_err(runtime)?)
        .map_err(runtime)?;
    let ends = ensemble(cfg.n_paths, cfg.seed, |_, s| {
        Ok(case.sde.integrate(&case.x0, cfg.epsilon, &bundle(grid, m, s)?)?.last())
    })
    .map_err(runtime)?;
    let terminal: Vec<Estimate> = (0..case.x0.len())
        .map(|i| Estimate::from_samples(&ends.iter().map(|x| x[i]).collect::<Vec<_>>()))
        .collect();
    let mut run = Run::new("simulate", &cfg, cfg.seed, &inv.out)?;
    run.csv("trajectory.csv", &first.to_csv(), &[("system", case.name.to_string())]);
    run.json(
        "summary.json",
        json!({
            "system": case.name,
            "n_paths": cfg.n_paths,
            "epsilon": cfg.epsilon,
            "t_end": grid.t_end(),
            "terminal": estimates_json(&terminal),
        }),
    )?;
    run.finish()
}

pub fn sensitivity(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: SensitivityConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    let case = cfg.system.build().map_err(|e| invalid("system", e))?;
    let grid = cfg.grid.build()?;
    let d = case.x0.len();
    if let Some(p) = cfg.pairs.iter().find(|(i, j)| *i >= d || *j >= d) {
        return Err(CliError::Config(format!("pairs: {p:?} out of range for dimension {d}")));
    }
    set_workers(cfg.workers)?;
    let b = bundle(grid, case.sde.n_noise(), derive_seed(cfg.seed, 0)).map_err(runtime)?;
    let base = case.sde.integrate(&case.x0, 0.0, &b).map_err(runtime)?;
    let phi = integrate_fundamental_matrix(&case.sde, &base, &b).map_err(runtime)?;
    let sens = match cfg.kind {
        SensitivityKindConfig::Epsilon => integrate_epsilon_sensitivities(&case.sde, &base, &b),
        SensitivityKindConfig::InitialValue => integrate_initial_value_sensitivities(
            &case.sde.base,
            &base,
            &b,
            &cfg.pairs,
            cfg.second_order_init.into(),
        ),
    }
    .map_err(runtime)?;
    let deviation = match cfg.kind {
        SensitivityKindConfig::Epsilon => {
            let xi = integrate_xi(&case.sde, &base, &phi, &b).map_err(runtime)?;
            Some(solution_formula_check(&case.sde, &base, &phi, &xi, &b).map_err(runtime)?)
        }
        SensitivityKindConfig::InitialValue => None,
    };
    let mut buf = Vec::new();
    sens.write_csv(&mut buf).map_err(runtime)?;
    let mut run = Run::new("sensitivity", &cfg, cfg.seed, &inv.out)?;
    run.csv("sensitivity.csv", &String::from_utf8_lossy(&buf), &[("system", case.name.to_string())]);
    run.json(
        "summary.json",
        json!({
            "system": case.name,
            "inverse_defect": phi.inverse_defect(),
            "sup_phi_frobenius_sq": phi.sup_frobenius_sq(),
            "formula_deviation": deviation,
        }),
    )?;
    run.finish()
}

pub fn regcheck(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: RegcheckConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let case = cfg.system.build().map_err(|e| invalid("system", e))?;
    let grid = cfg.grid.build()?;
    let problem = RegProblem::new(case.sde, case.x0, grid, case.loss).map_err(|e| invalid("system", e))?;
    set_workers(cfg.workers)?;
    let variant = ResidualVariant {
        convention: cfg.convention,
        include_bias: cfg.include_bias,
        bias_half_s: cfg.bias_half_s,
    };
    let scan = taylor_residual_scan(&problem, cfg.t, &cfg.epsilons, cfg.n_paths, cfg.seed, &[variant])
        .map_err(runtime)?
        .remove(0);
    let options = RegOptions { convention: cfg.convention, bias_half_s: cfg.bias_half_s };
    let report = estimate_regularizer(&problem, cfg.t, cfg.report_epsilon, cfg.n_paths, cfg.seed, options)
        .map_err(runtime)?;
    let slope = scan.slope.map_or_else(|| "nan".to_string(), |s| s.to_string());
    let mut run = Run::new("regcheck", &cfg, cfg.seed, &inv.out)?;
    run.csv("residuals.csv", &scan.to_csv(), &[("system", case.name.to_string()), ("slope", slope)]);
    let mut j = report.to_json();
    j["system"] = case.name.into();
    j["residual_slope"] = scan.slope.into();
    j["include_bias"] = cfg.include_bias.into();
    run.json("report.json", j)?;
    run.finish()
}

pub fn divergence(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: DivergenceConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    cfg.validate()?;
    let (system, h0, z0) = cfg.system.build();
    let problem = RolloutProblem { system, h0, z0, grid: cfg.grid.build()?, target: cfg.target };
    if let Some(q) = &cfg.q_check {
        if q.action.len() != problem.system.dim_a {
            return Err(CliError::Config(format!(
                "q_check.action: expected {} entries, got {}",
                problem.system.dim_a,
                q.action.len()
            )));
        }
    }
    set_workers(cfg.workers)?;
    let catalog = estimate_term_catalog(&problem, cfg.n_paths, cfg.seed, true).map_err(runtime)?;
    let scan = divergence_scan(&problem, cfg.distribution, &cfg.deltas, cfg.n_paths, derive_seed(cfg.seed, 1), &catalog)
        .map_err(runtime)?;
    let mut run = Run::new("divergence", &cfg, cfg.seed, &inv.out)?;
    run.csv("divergence.csv", &scan.to_csv(), &[]);
    let mut report = json!({
        "catalog": catalog,
        "scan": scan,
        "bound_holds": scan.holds(),
    });
    if let Some(q) = &cfg.q_check {
        let action = Vector::from_vec(q.action.clone());
        let qs = q_expansion_check(&problem, cfg.distribution, &q.deltas, &action, q.t, q.n_paths, derive_seed(cfg.seed, 2))
            .map_err(runtime)?;
        let slope = qs.slope.map_or_else(|| "nan".to_string(), |s| s.to_string());
        run.csv("q_expansion.csv", &qs.to_csv(), &[("slope", slope)]);
        report["q_expansion_slope"] = qs.slope.into();
    }
    run.json("report.json", report)?;
    run.finish()
}

/// Written next to the parameter file so `evaluate` and `rollout` can
/// rebuild the architecture.
#[derive(Serialize, Deserialize)]
struct ModelMeta {
    dims: ModelDims,
}

fn load_model(path: &Path) -> Result<LdmModel, CliError> {
    let meta_path = path.with_file_name("model.json");
    let text = std::fs::read_to_string(&meta_path)
        .map_err(|e| CliError::Config(format!("model: {}: {e}", meta_path.display())))?;
    let meta: ModelMeta =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("model: {}: {e}", meta_path.display())))?;
    LdmModel::load(meta.dims, &path).map_err(|e| CliError::Config(format!("model: {}: {e}", path.display())))
}

fn check_env(env: &ToyEnv) -> Result<(), CliError> {
    env.validate().map_err(|e| invalid("env", e))
}

pub fn train_cmd(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: TrainFileConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    cfg.train.seed = cfg.seed;
    check_env(&cfg.env)?;
    cfg.train.validate().map_err(|e| invalid("train", e))?;
    set_workers(cfg.workers)?;
    let (model, log) = train(&cfg.env, &cfg.train).map_err(runtime)?;
    let mut params = Vec::new();
    write_params(&mut params, &model.params()).map_err(runtime)?;
    let mut run = Run::new("train", &cfg, cfg.seed, &inv.out)?;
    run.bytes("model.bin", params);
    run.json("model.json", json!({ "dims": model.dims, "env": cfg.env, "train": cfg.train }))?;
    run.csv("train_log.csv", &log.to_csv(), &[]);
    run.finish()
}

pub fn evaluate(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: EvaluateConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    cfg.eval.seed = cfg.seed;
    check_env(&cfg.env)?;
    let model = load_model(&cfg.model)?;
    set_workers(cfg.workers)?;
    let report = evaluate_robustness(&model, &cfg.env, &cfg.suite, &cfg.eval).map_err(runtime)?;
    let mut run = Run::new("evaluate", &cfg, cfg.seed, &inv.out)?;
    run.json("robustness.json", serde_json::to_value(&report).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    run.finish()
}

pub fn rollout(inv: &Invocation) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg: RolloutConfig = config::load(&inv.config)?;
    cfg.seed = inv.seed.unwrap_or(cfg.seed);
    check_env(&cfg.env)?;
    if cfg.horizon == 0 || cfg.n_rollouts == 0 {
        return Err(CliError::Config("horizon and n_rollouts must be at least 1".into()));
    }
    let model = load_model(&cfg.model)?;
    set_workers(cfg.workers)?;
    let runs = ensemble(cfg.n_rollouts, cfg.seed, |_, s| rollout_openloop(&model, &cfg.env, cfg.horizon, s))
        .map_err(runtime)?;
    let mut mean = String::from("step,divergence,stderr\n");
    for k in 0..cfg.horizon {
        let e = Estimate::from_samples(&runs.iter().map(|r| r.divergence[k]).collect::<Vec<_>>());
        mean.push_str(&format!("{},{:.16e},{:.16e}\n", k + 1, e.mean, e.stderr));
    }
    let mut run = Run::new("rollout", &cfg, cfg.seed, &inv.out)?;
    run.csv("openloop.csv", &runs[0].to_csv(), &[]);
    run.csv("openloop_mean.csv", &mean, &[("n_rollouts", cfg.n_rollouts.to_string())]);
    run.finish()
}
