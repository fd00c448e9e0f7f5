use std::sync::Arc;

use ldmsde::divergence::{
    divergence_scan, empirical_divergence, estimate_term_catalog, newton_argmax, policy_derivatives, q_expansion_check,
    rollout, sensitivity_bound_check, EpsDistribution, PerturbTarget, RolloutProblem,
};
use ldmsde::stats::loglog_slope;
use ldmsde::systems;
use ldmsde::{BrownianBundle, TimeGrid, Vector};
use proptest::prelude::*;

fn contraction() -> RolloutProblem {
    RolloutProblem {
        system: systems::scalar_contraction(0.2),
        h0: Vector::from_element(1, 0.5),
        z0: Vector::from_element(1, 0.3),
        grid: TimeGrid::new(1.0, 100).unwrap(),
        target: PerturbTarget::Latent,
    }
}

#[test]
fn policy_derivative_matches_a_central_difference_of_the_argmax() {
    let q = systems::smooth_q();
    let (h, z) = (0.4, -0.3);
    let d = policy_derivatives(&q, &[h], &[z], &Vector::zeros(1), false).unwrap();
    let argmax = |h: f64, z: f64| newton_argmax(&q, &[h], &[z], &Vector::zeros(1)).unwrap()[0];
    let steps = [4e-2, 2e-2, 1e-2, 5e-3];
    let mut eh = Vec::new();
    let mut ez = Vec::new();
    for &s in &steps {
        eh.push(((argmax(h + s, z) - argmax(h - s, z)) / (2.0 * s) - d.d_h[(0, 0)]).abs());
        ez.push(((argmax(h, z + s) - argmax(h, z - s)) / (2.0 * s) - d.d_z[(0, 0)]).abs());
    }
    for e in [&eh, &ez] {
        let slope = loglog_slope(&steps, e).unwrap();
        assert!((slope - 2.0).abs() < 0.2, "{slope} {e:?}");
    }
}

#[test]
fn divergence_is_monotone_in_delta() {
    let p = contraction();
    let cat = estimate_term_catalog(&p, 500, 4, true).unwrap();
    for dist in [EpsDistribution::Gaussian, EpsDistribution::UniformSphere, EpsDistribution::Sparse { magnitude: 0.5 }] {
        let scan = divergence_scan(&p, dist, &[0.0, 1e-3, 1e-2, 1e-1], 500, 6, &cat).unwrap();
        assert_eq!(scan.rows[0].d_eps.mean, 0.0);
        for w in scan.rows.windows(2) {
            let band = 2.0 * (w[0].d_eps.stderr + w[1].d_eps.stderr);
            assert!(w[1].d_eps.mean + band >= w[0].d_eps.mean, "{dist:?} {w:?}");
        }
        assert!(scan.to_csv().starts_with("delta,d_eps,bound,slope\n"));
    }
}

#[test]
fn report_serializes_with_its_catalog() {
    let p = contraction();
    let cat = estimate_term_catalog(&p, 50, 4, true).unwrap();
    let r = empirical_divergence(&p, EpsDistribution::Gaussian, 0.05, 50, 8, &cat, 1.0).unwrap();
    assert!(r.d_eps.mean > 0.0);
    let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(v["delta"], 0.05);
    assert!(v["catalog"]["j0"].as_f64().unwrap() >= 1.0);
}

#[test]
fn sensitivity_norms_respect_the_calibrated_bound() {
    let p = RolloutProblem {
        system: systems::smooth_rollout(0.1),
        h0: Vector::from_element(1, 0.3),
        z0: Vector::from_element(1, 0.5),
        grid: TimeGrid::new(1.0, 50).unwrap(),
        target: PerturbTarget::HiddenAndLatent,
    };
    let cat = estimate_term_catalog(&p, 300, 2, true).unwrap();
    // calibrate on the first-order terms, then the second-order terms must
    // sit under the same constant
    let probe = sensitivity_bound_check(&p, &cat, 1.0, 300, 3).unwrap();
    let c = probe.first.iter().map(|e| e.mean).fold(0.0, f64::max) / (cat.j0 + cat.j1);
    let chk = sensitivity_bound_check(&p, &cat, c, 300, 3).unwrap();
    assert!(chk.holds, "{chk:?}");
}

#[test]
fn q_expansion_residual_vanishes_at_zero_error() {
    let p = contraction();
    let r = q_expansion_check(&p, EpsDistribution::Gaussian, &[0.0, 0.05], &Vector::from_element(1, 0.1), 0.5, 50, 1).unwrap();
    assert_eq!(r.rows[0].residual.mean, 0.0);
    assert!(r.rows[1].residual.mean > 0.0);
}

#[test]
fn non_concave_value_function_is_reported() {
    use ldmsde::divergence::{FnQValue, RolloutSystem};
    use ldmsde::{Matrix, ZeroField};
    let q = FnQValue::new(
        (1, 1, 1),
        |u| u[2] * u[2] - u[0] * u[2],
        |u| Vector::from_vec(vec![-u[2], 0.0, 2.0 * u[2] - u[0]]),
        |_| Matrix::from_row_slice(3, 3, &[0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 2.0]),
    );
    let f = ldmsde::AffineField::linear(Matrix::from_row_slice(1, 3, &[-1.0, 0.0, 0.5])).shared();
    let sys = RolloutSystem::new(f, ZeroField::shared(1, 1), ZeroField::shared(1, 1), Arc::new(q)).unwrap();
    let b = BrownianBundle::generate(TimeGrid::new(1.0, 10).unwrap(), 1, 0).unwrap();
    let r = rollout(&sys, &Vector::from_element(1, 0.2), &Vector::zeros(1), &Vector::zeros(1), PerturbTarget::Latent, &b);
    assert!(matches!(r, Err(ldmsde::Error::PolicyUndefined { step: 0, .. })), "{:?}", r.err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn zero_error_rollout_is_the_unperturbed_rollout(seed in any::<u64>(), h in -1.0f64..1.0, z in -1.0f64..1.0) {
        let sys = systems::smooth_rollout(0.1);
        let b = BrownianBundle::generate(TimeGrid::new(0.5, 25).unwrap(), 1, seed).unwrap();
        let (h0, z0) = (Vector::from_element(1, h), Vector::from_element(1, z));
        let a = rollout(&sys, &h0, &z0, &Vector::zeros(1), PerturbTarget::Latent, &b).unwrap();
        let c = rollout(&sys, &h0, &z0, &Vector::zeros(2), PerturbTarget::HiddenAndLatent, &b).unwrap();
        prop_assert_eq!(a.states.clone(), c.states);
        prop_assert_eq!(a.states.state(0), sys.stack(&h0, &z0));
    }

    #[test]
    fn policy_first_derivative_is_the_implicit_function_formula(h in -1.5f64..1.5, z in -1.5f64..1.5) {
        let q = systems::smooth_q();
        let d = policy_derivatives(&q, &[h], &[z], &Vector::zeros(1), false).unwrap();
        let a = d.rho[0];
        // Q_aa = -3a^2 - 2, Q_ah = cos h, Q_az = z
        let qaa = -3.0 * a * a - 2.0;
        prop_assert!((d.d_h[(0, 0)] + h.cos() / qaa).abs() < 1e-12);
        prop_assert!((d.d_z[(0, 0)] + z / qaa).abs() < 1e-12);
    }
}
