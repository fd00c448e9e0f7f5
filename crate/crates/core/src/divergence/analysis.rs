use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Vector;
use crate::grid::derive_seed;
use crate::sensitivity::{integrate_initial_value_sensitivities, SecondOrderInit};
use crate::stats::{ensemble, loglog_slope, Estimate};

use super::catalog::{bound_shape, TermCatalog};
use super::qvalue::stack_hza;
use super::{rollout, RolloutProblem};

// Stream index reserved for the initial-error draw of each path, away from
// the Brownian components.
const EPS_STREAM: u64 = 0x00e5_0000;

/// `E |N(0, I_n)|`, by `c_1 = sqrt(2/pi)`, `c_{n+1} = n / c_n`.
pub fn unit_gaussian_mean_norm(n: usize) -> f64 {
    let mut c = (2.0 / std::f64::consts::PI).sqrt();
    for k in 1..n.max(1) {
        c = k as f64 / c;
    }
    c
}

/// Family of initial errors, parameterised by `delta = E|eps|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsDistribution {
    /// Isotropic Gaussian scaled to mean norm `delta`.
    Gaussian,
    /// Uniform direction, norm exactly `delta`.
    UniformSphere,
    /// Zero with probability `1 - delta/magnitude`, otherwise a uniform
    /// direction of norm `magnitude`.
    Sparse { magnitude: f64 },
}

/// One path's draw, reused for every `delta` so the scan is coupled.
#[derive(Clone, Debug)]
struct EpsDraw {
    direction: Vector,
    uniform: f64,
}

impl EpsDistribution {
    /// Draw for path `index` of `n_paths`. The uniform that decides whether a
    /// sparse error fires is stratified over the ensemble, so the number of
    /// perturbed paths is `n_paths * delta / magnitude` up to rounding.
    fn draw(&self, dim: usize, seed: u64, index: usize, n_paths: usize) -> EpsDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Vector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let u: f64 = Uniform::new(0.0, 1.0).expect("unit interval").sample(&mut rng);
        let uniform = (index as f64 + u) / n_paths.max(1) as f64;
        let direction = match self {
            EpsDistribution::Gaussian => g / unit_gaussian_mean_norm(dim),
            _ => {
                let n = g.norm();
                g / n
            }
        };
        EpsDraw { direction, uniform }
    }

    fn realise(&self, draw: &EpsDraw, delta: f64) -> Result<Vector> {
        if !(delta >= 0.0) || !delta.is_finite() {
            return Err(Error::InvalidArgument(format!("delta must be finite and >= 0, got {delta}")));
        }
        match *self {
            EpsDistribution::Sparse { magnitude } => {
                if !(magnitude > 0.0) || delta > magnitude {
                    return Err(Error::InvalidArgument(format!(
                        "sparse error needs 0 <= delta <= magnitude, got delta {delta}, magnitude {magnitude}"
                    )));
                }
                Ok(if draw.uniform < delta / magnitude {
                    &draw.direction * magnitude
                } else {
                    Vector::zeros(draw.direction.len())
                })
            }
            _ => Ok(&draw.direction * delta),
        }
    }

    /// A single sample with `E|eps| = delta`.
    pub fn sample(&self, dim: usize, delta: f64, seed: u64) -> Result<Vector> {
        self.realise(&self.draw(dim, seed, 0, 1), delta)
    }
}

fn sup_sq_divergence(a: &crate::sde::Trajectory, b: &crate::sde::Trajectory) -> f64 {
    (0..a.len())
        .map(|n| (a.state(n) - b.state(n)).norm_squared())
        .fold(0.0, f64::max)
}

/// Per-path `sup_t |x^eps - x^0|^2` for every delta on one shared bundle.
fn path_divergences(
    problem: &RolloutProblem,
    dist: EpsDistribution,
    deltas: &[f64],
    (index, n_paths, seed): (usize, usize, u64),
) -> Result<Vec<f64>> {
    let sys = &problem.system;
    let dim = sys.eps_dim(problem.target);
    let bundle = problem.bundle(seed)?;
    let base = rollout(sys, &problem.h0, &problem.z0, &Vector::zeros(dim), problem.target, &bundle)?;
    let draw = dist.draw(dim, derive_seed(seed, EPS_STREAM), index, n_paths);
    deltas
        .iter()
        .map(|&delta| {
            let eps = dist.realise(&draw, delta)?;
            if eps.iter().all(|v| *v == 0.0) {
                return Ok(0.0);
            }
            let pert = rollout(sys, &problem.h0, &problem.z0, &eps, problem.target, &bundle)?;
            Ok(sup_sq_divergence(&pert.states, &base.states))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct DivergenceReport {
    pub delta: f64,
    pub d_eps: Estimate,
    pub bound: f64,
    pub c: f64,
    pub holds: bool,
    pub distribution: EpsDistribution,
    pub catalog: TermCatalog,
    pub n_paths: usize,
    pub seed: u64,
}

impl DivergenceReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// `d_eps = E sup_t |x^eps_t - x^0_t|^2` over coupled rollouts, with the
/// bound evaluated at the constant `c`.
pub fn empirical_divergence(
    problem: &RolloutProblem,
    dist: EpsDistribution,
    delta: f64,
    n_paths: usize,
    seed: u64,
    catalog: &TermCatalog,
    c: f64,
) -> Result<DivergenceReport> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("divergence needs at least one path".into()));
    }
    let rows = ensemble(n_paths, seed, |i, s| path_divergences(problem, dist, &[delta], (i, n_paths, s)))?;
    let d_eps = Estimate::from_samples(&rows.iter().map(|r| r[0]).collect::<Vec<_>>());
    let bound = c * bound_shape(catalog, delta)?;
    Ok(DivergenceReport {
        delta,
        d_eps,
        bound,
        c,
        holds: d_eps.mean <= bound,
        distribution: dist,
        catalog: catalog.clone(),
        n_paths,
        seed,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DivergenceRow {
    pub delta: f64,
    pub d_eps: Estimate,
    pub bound: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DivergenceScan {
    pub distribution: EpsDistribution,
    pub rows: Vec<DivergenceRow>,
    /// Calibrated so the bound is tight at the smallest positive delta.
    pub c: f64,
    /// Log-log slope of `d_eps` over the positive deltas.
    pub slope: Option<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

impl DivergenceScan {
    pub fn holds(&self) -> bool {
        self.rows.iter().all(|r| r.d_eps.mean <= r.bound * (1.0 + 1e-12))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,d_eps,bound,slope\n");
        let slope = self.slope.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.delta, r.d_eps.mean, r.bound, slope));
        }
        s
    }
}

/// Coupled delta scan: every path draws one error direction and one bundle
/// and reuses them for all deltas.
pub fn divergence_scan(
    problem: &RolloutProblem,
    dist: EpsDistribution,
    deltas: &[f64],
    n_paths: usize,
    seed: u64,
    catalog: &TermCatalog,
) -> Result<DivergenceScan> {
    if n_paths == 0 || deltas.is_empty() {
        return Err(Error::InvalidArgument("divergence scan needs paths and deltas".into()));
    }
    let per_path = ensemble(n_paths, seed, |i, s| path_divergences(problem, dist, deltas, (i, n_paths, s)))?;
    let d: Vec<Estimate> = (0..deltas.len())
        .map(|k| Estimate::from_samples(&per_path.iter().map(|r| r[k]).collect::<Vec<_>>()))
        .collect();
    let c = match deltas
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .min_by(|a, b| a.1.total_cmp(b.1))
    {
        Some((k, &dmin)) => d[k].mean / bound_shape(catalog, dmin)?,
        None => 0.0,
    };
    let rows = deltas
        .iter()
        .zip(&d)
        .map(|(&delta, est)| Ok(DivergenceRow { delta, d_eps: *est, bound: c * bound_shape(catalog, delta)? }))
        .collect::<Result<Vec<_>>>()?;
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.delta > 0.0)
        .map(|r| (r.delta, r.d_eps.mean))
        .unzip();
    Ok(DivergenceScan {
        distribution: dist,
        rows,
        c,
        slope: loglog_slope(&xs, &ys).ok(),
        n_paths,
        seed,
    })
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct QExpansionRow {
    pub delta: f64,
    /// Mean absolute residual of the second-order expansion at `t`.
    pub residual: Estimate,
    /// Mean absolute value of `Q(x^eps, a)`, for scale.
    pub q_scale: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct QExpansionScan {
    pub rows: Vec<QExpansionRow>,
    pub slope: Option<f64>,
    pub t: f64,
}

impl QExpansionScan {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("delta,residual,stderr,q_scale\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.delta, r.residual.mean, r.residual.stderr, r.q_scale));
        }
        s
    }
}

/// Residual of the second-order expansion of `Q(x^eps_t, a)` about the
/// unperturbed path in the initial error, using the first and second
/// initial-value sensitivities of the closed-loop system.
pub fn q_expansion_check(
    problem: &RolloutProblem,
    dist: EpsDistribution,
    deltas: &[f64],
    action: &Vector,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> Result<QExpansionScan> {
    let sys = &problem.system;
    if action.len() != sys.dim_a {
        return Err(Error::Dimension { context: "fixed action".into(), expected: sys.dim_a, found: action.len() });
    }
    if n_paths == 0 || deltas.is_empty() {
        return Err(Error::InvalidArgument("expansion check needs paths and deltas".into()));
    }
    let n_t = problem.grid.index_of(t)?;
    let closed = sys.closed_loop()?;
    let coords = sys.perturbed_coordinates(problem.target);
    let mut pairs = Vec::new();
    for (a, &i) in coords.iter().enumerate() {
        for &j in &coords[a..] {
            pairs.push((i, j));
        }
    }
    let nh = sys.dim_h;
    let x0 = problem.x0();
    let q_at = |x: &Vector| {
        let (h, z) = x.as_slice().split_at(nh);
        stack_hza(h, z, action.as_slice())
    };
    let per_path = ensemble(n_paths, seed, |i, s| {
        let bundle = problem.bundle(s)?;
        let base = closed.integrate(&x0, &bundle)?;
        let sens = integrate_initial_value_sensitivities(&closed, &base, &bundle, &pairs, SecondOrderInit::Zero)?;
        let xb = base.state(n_t);
        let u = q_at(&xb);
        let q0 = sys.q.eval(&u);
        let grad = sys.q.gradient(&u).rows(0, sys.dim()).into_owned();
        let hess = sys.q.hessian(&u).view((0, 0), (sys.dim(), sys.dim())).into_owned();
        let draw = dist.draw(coords.len(), derive_seed(s, EPS_STREAM), i, n_paths);
        let mut out = Vec::with_capacity(2 * deltas.len());
        for &delta in deltas {
            let eps = dist.realise(&draw, delta)?;
            let xe0 = sys.perturbed_initial(&x0, &eps, problem.target)?;
            let pert = closed.integrate(&xe0, &bundle)?;
            let qe = sys.q.eval(&q_at(&pert.state(n_t)));
            let mut lin = Vector::zeros(sys.dim());
            for (a, &i) in coords.iter().enumerate() {
                lin += sens.first[i].state(n_t) * eps[a];
            }
            let mut quad = Vector::zeros(sys.dim());
            for ((i, j), tr) in &sens.second {
                let a = coords.iter().position(|c| c == i).unwrap();
                let b = coords.iter().position(|c| c == j).unwrap();
                let w = if i == j { 1.0 } else { 2.0 };
                quad += tr.state(n_t) * (w * eps[a] * eps[b]);
            }
            let expansion = q0 + grad.dot(&(&lin + quad * 0.5)) + 0.5 * lin.dot(&(&hess * &lin));
            out.push((qe - expansion).abs());
            out.push(qe.abs());
        }
        Ok(out)
    })?;
    let rows: Vec<QExpansionRow> = deltas
        .iter()
        .enumerate()
        .map(|(k, &delta)| QExpansionRow {
            delta,
            residual: Estimate::from_samples(&per_path.iter().map(|r| r[2 * k]).collect::<Vec<_>>()),
            q_scale: per_path.iter().map(|r| r[2 * k + 1]).sum::<f64>() / n_paths as f64,
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.delta > 0.0)
        .map(|r| (r.delta, r.residual.mean))
        .unzip();
    Ok(QExpansionScan { rows, slope: loglog_slope(&xs, &ys).ok(), t: problem.grid.time(n_t) })
}

/// Empirical `E sup_t |d_i x_t|` and `E sup_t |d_ij x_t|` over the perturbed
/// coordinates against `C (J0 + J1)` and `C (exp(H0 (J0+J1)) + exp(H1 (J0+J1)))`.
#[derive(Clone, Debug, Serialize)]
pub struct SensitivityBoundCheck {
    pub first: Vec<Estimate>,
    pub second: Vec<Estimate>,
    pub first_bound: f64,
    pub second_bound: f64,
    pub c: f64,
    pub holds: bool,
}

pub fn sensitivity_bound_check(
    problem: &RolloutProblem,
    catalog: &TermCatalog,
    c: f64,
    n_paths: usize,
    seed: u64,
) -> Result<SensitivityBoundCheck> {
    let (h0, h1) = match (catalog.h0, catalog.h1) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::InvalidArgument("sensitivity bounds need the second-order catalog terms".into())),
    };
    let sys = &problem.system;
    let closed = sys.closed_loop()?;
    let coords = sys.perturbed_coordinates(problem.target);
    let mut pairs = Vec::new();
    for (a, &i) in coords.iter().enumerate() {
        for &j in &coords[a..] {
            pairs.push((i, j));
        }
    }
    let x0 = problem.x0();
    let per_path = ensemble(n_paths, seed, |_, s| {
        let bundle = problem.bundle(s)?;
        let base = closed.integrate(&x0, &bundle)?;
        let sens = integrate_initial_value_sensitivities(&closed, &base, &bundle, &pairs, SecondOrderInit::Zero)?;
        let sup = |tr: &crate::sde::Trajectory| (0..tr.len()).map(|n| tr.state(n).norm()).fold(0.0, f64::max);
        let mut out: Vec<f64> = coords.iter().map(|&i| sup(&sens.first[i])).collect();
        out.extend(sens.second.iter().map(|(_, tr)| sup(tr)));
        Ok(out)
    })?;
    let col = |k: usize| Estimate::from_samples(&per_path.iter().map(|r| r[k]).collect::<Vec<_>>());
    let first: Vec<Estimate> = (0..coords.len()).map(col).collect();
    let second: Vec<Estimate> = (coords.len()..coords.len() + pairs.len()).map(col).collect();
    let j = catalog.j0 + catalog.j1;
    let first_bound = c * j;
    let second_bound = c * ((h0 * j).exp() + (h1 * j).exp());
    let holds = first.iter().all(|e| e.mean <= first_bound) && second.iter().all(|e| e.mean <= second_bound);
    Ok(SensitivityBoundCheck { first, second, first_bound, second_bound, c, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::catalog::estimate_term_catalog;
    use crate::divergence::tests::{linear_system, scalar_contraction};
    use crate::divergence::PerturbTarget;
    use crate::grid::TimeGrid;

    fn problem() -> RolloutProblem {
        RolloutProblem {
            system: linear_system(0.2),
            h0: Vector::from_vec(vec![0.5, -0.2]),
            z0: Vector::from_element(1, 0.3),
            grid: TimeGrid::new(1.0, 20).unwrap(),
            target: PerturbTarget::HiddenAndLatent,
        }
    }

    #[test]
    fn gaussian_mean_norm_matches_known_values() {
        assert!((unit_gaussian_mean_norm(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((unit_gaussian_mean_norm(2) - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-15);
        // chi mean for n = 3 is 2 sqrt(2/pi)
        assert!((unit_gaussian_mean_norm(3) - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn every_family_has_mean_norm_delta() {
        for dist in [
            EpsDistribution::Gaussian,
            EpsDistribution::UniformSphere,
            EpsDistribution::Sparse { magnitude: 0.5 },
        ] {
            let n = 40_000;
            let norms: Vec<f64> = (0..n).map(|i| dist.sample(3, 0.1, i as u64).unwrap().norm()).collect();
            let e = Estimate::from_samples(&norms);
            assert!((e.mean - 0.1).abs() <= 5.0 * e.stderr + 1e-12, "{dist:?}: {e:?}");
        }
    }

    #[test]
    fn zero_delta_gives_zero_divergence() {
        let p = problem();
        let cat = estimate_term_catalog(&p, 4, 1, true).unwrap();
        let r = empirical_divergence(&p, EpsDistribution::Gaussian, 0.0, 16, 2, &cat, 1.0).unwrap();
        assert_eq!(r.d_eps.mean, 0.0);
        assert!(r.to_json().unwrap().contains("\"d_eps\""));
    }

    #[test]
    fn sparse_errors_scale_linearly_and_respect_the_bound() {
        let p = RolloutProblem {
            system: scalar_contraction(),
            h0: Vector::from_element(1, 0.5),
            z0: Vector::from_element(1, 0.3),
            grid: TimeGrid::new(1.0, 20).unwrap(),
            target: PerturbTarget::Latent,
        };
        let cat = estimate_term_catalog(&p, 8, 1, true).unwrap();
        let deltas = [0.0, 0.001, 0.01, 0.1];
        let scan = divergence_scan(&p, EpsDistribution::Sparse { magnitude: 0.5 }, &deltas, 2000, 3, &cat).unwrap();
        assert_eq!(scan.rows[0].d_eps.mean, 0.0);
        let slope = scan.slope.unwrap();
        assert!((0.8..1.2).contains(&slope), "slope {slope}");
        assert!(scan.holds(), "{}", scan.to_csv());
        assert!(scan.to_csv().starts_with("delta,d_eps,bound,slope\n"));
    }

    #[test]
    fn fixed_shape_errors_scale_quadratically() {
        let p = problem();
        let cat = estimate_term_catalog(&p, 8, 1, true).unwrap();
        let scan = divergence_scan(&p, EpsDistribution::Gaussian, &[0.001, 0.01, 0.1], 200, 3, &cat).unwrap();
        assert!((scan.slope.unwrap() - 2.0).abs() < 0.05);
    }

    #[test]
    fn linear_quadratic_expansion_is_exact() {
        let p = problem();
        let a = Vector::from_element(1, 0.4);
        let s = q_expansion_check(&p, EpsDistribution::Gaussian, &[0.0, 0.05, 0.2], &a, 1.0, 8, 4).unwrap();
        assert_eq!(s.rows[0].residual.mean, 0.0);
        for r in &s.rows[1..] {
            assert!(r.residual.mean < 1e-12 * r.q_scale.max(1.0), "{r:?}");
        }
    }

    #[test]
    fn sensitivity_bound_holds_with_unit_constant_on_a_contraction() {
        let p = problem();
        let cat = estimate_term_catalog(&p, 8, 1, true).unwrap();
        let chk = sensitivity_bound_check(&p, &cat, 1.0, 32, 5).unwrap();
        assert_eq!(chk.first.len(), 3);
        assert_eq!(chk.second.len(), 6);
        assert!(chk.holds);
        for e in &chk.second {
            assert!(e.mean < 1e-12);
        }
    }
}
