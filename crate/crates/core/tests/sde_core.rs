use ldmsde::ldm::conditional_gaussian_moments;
use ldmsde::stats::{ensemble, variance_estimate, Estimate};
use ldmsde::systems;
use ldmsde::{euler_maruyama, AffineField, BrownianBundle, FnField, Matrix, SdeSystem, TimeGrid, Vector, ZeroField};
use proptest::prelude::*;

#[test]
fn brownian_terminal_variance_is_t() {
    let grid = TimeGrid::new(1.0, 1000).unwrap();
    let ends = ensemble(100_000, 17, |_, seed| Ok(BrownianBundle::generate(grid, 1, seed)?.terminal()[0])).unwrap();
    let v = variance_estimate(&ends);
    assert!(v.z_score(1.0).abs() < 5.0, "{v:?}");
    assert!(Estimate::from_samples(&ends).z_score(0.0).abs() < 5.0);
}

#[test]
fn gbm_mean_is_exponential() {
    let case = systems::gbm(0.05, 0.2, 1.0).unwrap();
    let grid = TimeGrid::new(1.0, 100).unwrap();
    let xs = ensemble(100_000, 5, |_, seed| {
        let b = BrownianBundle::generate(grid, 1, seed)?;
        Ok(case.sde.base.integrate(&case.x0, &b)?.last()[0])
    })
    .unwrap();
    let m = Estimate::from_samples(&xs);
    assert!(m.z_score(0.05f64.exp()).abs() < 5.0, "{m:?}");
}

#[test]
fn sine_drift_quadrature_reaches_two_at_pi() {
    let q = FnField::scalar("sin t", |_, t| t.sin(), |_, _| 0.0, |_, _| 0.0);
    let qbar = ZeroField::new(1, 1);
    let grid = TimeGrid::new(std::f64::consts::PI, 10_000).unwrap();
    let h = vec![Vector::zeros(1); grid.n_points()];
    let s = vec![Vector::zeros(0); grid.n_points()];
    let (mu, var) = conditional_gaussian_moments(&q, &qbar, &h, &s, &grid).unwrap();
    assert!((mu.last().unwrap()[0] - 2.0).abs() < 1e-4);
    assert!(var.iter().all(|v| v[0] == 0.0));
}

#[test]
fn scalar_linear_ode_endpoint() {
    let case = systems::scalar_linear(1.0, 0.0, 1.0, 0.0, 0.0).unwrap();
    let mut errs = Vec::new();
    for n in [100, 200, 400, 800] {
        // b = 0, so the noise draw is irrelevant
        let b = BrownianBundle::generate(TimeGrid::new(1.0, n).unwrap(), 1, 3).unwrap();
        let x = case.sde.base.integrate(&case.x0, &b).unwrap().last()[0];
        errs.push((x - std::f64::consts::E).abs());
    }
    // first order: halving dt halves the error
    for w in errs.windows(2) {
        assert!((w[0] / w[1] - 2.0).abs() < 0.05, "{errs:?}");
    }
}

proptest! {
    #[test]
    fn linear_drift_is_a_power_of_the_one_step_map(a in -2.0f64..2.0, x0 in -3.0f64..3.0, n in 1usize..200) {
        let sys = SdeSystem::new(AffineField::linear(Matrix::from_element(1, 1, a)).shared(), vec![]).unwrap();
        let b = BrownianBundle::deterministic(TimeGrid::new(1.0, n).unwrap());
        let x = sys.integrate(&Vector::from_element(1, x0), &b).unwrap().last()[0];
        let exact = x0 * (1.0 + a / n as f64).powi(n as i32);
        prop_assert!((x - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
    }

    #[test]
    fn trajectory_starts_at_the_initial_condition(x0 in -5.0f64..5.0, seed in any::<u64>()) {
        let case = systems::scalar_nonlinear(x0, false).unwrap();
        let b = BrownianBundle::generate(TimeGrid::new(0.5, 20).unwrap(), 1, seed).unwrap();
        let tr = euler_maruyama(case.sde.base.drift.as_ref(), &case.sde.base.diffusions, &case.x0, &b).unwrap();
        prop_assert_eq!(tr.state(0)[0], x0);
        prop_assert_eq!(tr.clone(), case.sde.base.integrate(&case.x0, &b).unwrap());
    }

    #[test]
    fn zero_error_fields_make_the_output_independent_of_epsilon(eps in -1.0f64..1.0, seed in any::<u64>()) {
        let case = systems::scalar_linear(-0.7, 0.4, 1.0, 0.0, 0.0).unwrap();
        let b = BrownianBundle::generate(TimeGrid::new(1.0, 30).unwrap(), 1, seed).unwrap();
        prop_assert_eq!(case.sde.integrate(&case.x0, eps, &b).unwrap(), case.sde.integrate(&case.x0, 0.0, &b).unwrap());
    }
}
