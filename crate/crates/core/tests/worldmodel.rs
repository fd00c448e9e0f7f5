use ldmsde::stats::{ensemble, median, Estimate};
use ldmsde::worldmodel::{
    collect_dataset, evaluate_robustness, jacobian_penalty, rollout_openloop, train, Activation, EncodeNoise, EvalConfig,
    LdmModel, LossWeights, Mlp, ToyEnv, TrainConfig,
};
use ldmsde::{Matrix, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn short(seed: u64, lambda: f64) -> TrainConfig {
    TrainConfig { steps: 1500, seed, lambda, ..TrainConfig::default() }
}

#[test]
fn trained_model_beats_an_untrained_one() {
    let env = ToyEnv::pendulum();
    let eval = EvalConfig { n_episodes: 8, ..EvalConfig::default() };
    let pairs = ensemble(5, 0, |seed, _| {
        let cfg = short(seed as u64, 0.0);
        let untrained = LdmModel::new(cfg.dims(&env), seed as u64);
        let (trained, _) = train(&env, &cfg)?;
        let clean = |m: &LdmModel| evaluate_robustness(m, &env, &[], &eval).map(|r| r.clean().mean_return.mean);
        Ok((clean(&untrained)?, clean(&trained)?))
    })
    .unwrap();
    let u = median(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let t = median(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    assert!(t > u, "trained {t} untrained {u}");
}

#[test]
fn openloop_divergence_does_not_shrink_with_horizon() {
    let env = ToyEnv::pendulum();
    let (model, _) = train(&env, &short(3, 0.0)).unwrap();
    let horizon = 60;
    let runs: Vec<Vec<f64>> = (0..10).map(|s| rollout_openloop(&model, &env, horizon, 500 + s).unwrap().divergence).collect();
    // cumulative mean error up to each horizon
    let cum: Vec<Vec<f64>> = runs
        .iter()
        .map(|r| r.iter().scan(0.0, |acc, d| { *acc += d; Some(*acc) }).enumerate().map(|(k, c)| c / (k + 1) as f64).collect())
        .collect();
    let at = |k: usize| Estimate::from_samples(&cum.iter().map(|c| c[k]).collect::<Vec<_>>());
    let checkpoints = [0, 9, 24, 59];
    for w in checkpoints.windows(2) {
        let (a, b) = (at(w[0]), at(w[1]));
        assert!(b.mean + 2.0 * (a.stderr + b.stderr) >= a.mean, "{a:?} {b:?}");
    }
    assert!(at(59).mean > at(0).mean);
}

#[test]
fn projection_penalty_converges_to_the_exact_jacobian_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Mlp::new(&[5, 7, 4], Activation::Tanh, Activation::Identity, &mut rng);
    let inputs: Vec<Vector> = (0..3).map(|k| Vector::from_fn(5, |i, _| ((i + 2 * k) as f64 * 0.37).sin())).collect();
    // full Jacobian by central differences
    let mut sq = 0.0;
    for u in &inputs {
        let mut j = Matrix::zeros(4, 5);
        for i in 0..5 {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            j.set_column(i, &((net.forward(&up) - net.forward(&dn)) / 2e-6));
        }
        sq += j.norm_squared();
    }
    let exact = (sq / inputs.len() as f64).sqrt();
    let est = ldmsde::worldmodel::network_penalty(&net, &inputs, 10_000, 12, None);
    assert!(((est - exact) / exact).abs() < 0.02, "{est} vs {exact}");
}

#[test]
fn penalty_of_a_zero_sequence_cell_is_zero() {
    let env = ToyEnv::pendulum();
    let cfg = TrainConfig::default();
    let mut model = LdmModel::new(cfg.dims(&env), 1);
    let mut p = model.params();
    for k in model.sequence_range() {
        p[k] = 0.0;
    }
    model.set_params(&p).unwrap();
    let inputs = vec![Vector::from_element(cfg.dims(&env).sequence_input(), 0.3); 4];
    assert_eq!(jacobian_penalty(&model, &inputs, 16, 2).unwrap(), 0.0);
}

#[test]
fn regularization_shrinks_the_heldout_jacobian_norm() {
    let env = ToyEnv::pendulum();
    let heldout = collect_dataset(&env, 8, 16, 999);
    let noise = vec![EncodeNoise::zeros(17, 2); heldout.len()];
    let norms = ensemble(3, 0, |seed, _| {
        let mut out = Vec::new();
        for lambda in [0.0, 0.1] {
            let (m, _) = train(&env, &short(seed as u64, lambda))?;
            let ev = m.loss_and_grad(&heldout, &noise, LossWeights::PLAIN)?;
            out.push(m.exact_sequence_jacobian_norm(&ev.cell_inputs));
        }
        Ok(out)
    })
    .unwrap();
    let base = median(&norms.iter().map(|r| r[0]).collect::<Vec<_>>());
    let reg = median(&norms.iter().map(|r| r[1]).collect::<Vec<_>>());
    assert!(reg < base, "{reg} vs {base}");
}
