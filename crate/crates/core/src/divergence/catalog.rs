use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{Matrix, Tensor3, Vector};
use crate::stats::{ensemble, Estimate};

use super::policy::{derivatives_at, sub_tensor};
use super::qvalue::stack_hza;
use super::{rollout, RolloutProblem};

/// Expected path suprema of the closed-loop derivative norms (squared
/// Frobenius), with the assembled exponents of the divergence bound.
/// Constants inside the exponents are taken as 1.
#[derive(Clone, Debug, Serialize)]
pub struct TermCatalog {
    pub f_h: Estimate,
    pub f_z: Estimate,
    pub p_h: Estimate,
    pub p_bar_h: Estimate,
    pub f_hh: Option<Estimate>,
    pub f_hz: Option<Estimate>,
    pub f_zh: Option<Estimate>,
    pub f_zz: Option<Estimate>,
    pub p_hh: Option<Estimate>,
    pub p_bar_hh: Option<Estimate>,
    pub j0: f64,
    pub j1: f64,
    pub h0: Option<f64>,
    pub h1: Option<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

/// `delta (J0 + J1) + delta^2 (exp(H0 (J0 + J1)) + exp(H1 (J0 + J1)))`;
/// the divergence bound is this times a constant.
pub fn bound_shape(catalog: &TermCatalog, delta: f64) -> Result<f64> {
    let (h0, h1) = match (catalog.h0, catalog.h1) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidArgument(
                "the divergence bound needs the second-order catalog terms".into(),
            ))
        }
    };
    let j = catalog.j0 + catalog.j1;
    Ok(delta * j + delta * delta * ((h0 * j).exp() + (h1 * j).exp()))
}

const N_TERMS: usize = 10;

// [l, i, j] += sum_c a[l, i, c] b[c, j]
fn add_tensor_matrix(out: &mut Tensor3, a: &Tensor3, b: &Matrix) {
    let (nl, ni, nc) = a.dims();
    let nj = b.ncols();
    for l in 0..nl {
        for i in 0..ni {
            for j in 0..nj {
                let mut s = 0.0;
                for c in 0..nc {
                    s += a.get(l, i, c) * b[(c, j)];
                }
                out.add(l, i, j, s);
            }
        }
    }
}

// [l, i, j] += sum_c a[l, j, c] b[c, i]
fn add_tensor_matrix_swapped(out: &mut Tensor3, a: &Tensor3, b: &Matrix) {
    let (nl, ni, nj) = out.dims();
    let nc = a.dims().2;
    for l in 0..nl {
        for i in 0..ni {
            for j in 0..nj {
                let mut s = 0.0;
                for c in 0..nc {
                    s += a.get(l, j, c) * b[(c, i)];
                }
                out.add(l, i, j, s);
            }
        }
    }
}

fn transposed(t: &Tensor3) -> Tensor3 {
    let (a, b, c) = t.dims();
    let mut out = Tensor3::zeros(a, c, b);
    for l in 0..a {
        for i in 0..b {
            for j in 0..c {
                out.set(l, j, i, t.get(l, i, j));
            }
        }
    }
    out
}

fn frob_sq(m: &Matrix) -> f64 {
    m.norm_squared()
}

/// Per-state values of the ten catalog norms (NaN where not requested).
fn local_terms(problem: &RolloutProblem, x: &Vector, action: &Vector, t: f64, second: bool) -> Result<[f64; N_TERMS]> {
    let sys = &problem.system;
    let (nh, nz, na) = (sys.dim_h, sys.dim_z, sys.dim_a);
    let (hs, zs) = x.as_slice().split_at(nh);
    let h = Vector::from_column_slice(hs);
    let d = derivatives_at(sys.q.as_ref(), hs, zs, action.clone(), second)?;
    let u = stack_hza(hs, zs, action.as_slice());
    let jf = sys.f.jacobian(&u, t);
    let f_h = jf.columns(0, nh).into_owned();
    let f_z = jf.columns(nh, nz).into_owned();
    let f_a = jf.columns(nh + nz, na).into_owned();
    let jp = sys.p.jacobian(&h, t);
    let jpb = sys.p_bar.jacobian(&h, t);
    let mut out = [f64::NAN; N_TERMS];
    out[0] = frob_sq(&(&f_h + &f_a * &d.d_h));
    out[1] = frob_sq(&(&f_z + &f_a * &d.d_z));
    out[2] = frob_sq(&jp);
    out[3] = frob_sq(&jpb);
    if second {
        let hf = sys.f.hessian(&u, t);
        let (oh, oz, oa) = (0, nh, nh + nz);
        let blk = |r1, n1, r2, n2| sub_tensor(&hf, 0, nh, r1, n1, r2, n2);
        let f_hh = blk(oh, nh, oh, nh);
        let f_hz = blk(oh, nh, oz, nz);
        let f_zz = blk(oz, nz, oz, nz);
        let f_ha = blk(oh, nh, oa, na);
        let f_za = blk(oz, nz, oa, na);
        let (r_hh, r_hz, r_zh, r_zz) = (
            d.d_hh.as_ref().unwrap(),
            d.d_hz.as_ref().unwrap(),
            d.d_zh.as_ref().unwrap(),
            d.d_zz.as_ref().unwrap(),
        );

        let mut c_hh = f_hh;
        add_tensor_matrix(&mut c_hh, &f_ha, &d.d_h);
        c_hh.add_assign(&r_hh.left_multiply(&f_a));

        // [l, h_i, z_j]: the z-a cross term and the mixed policy derivative
        // are laid out over (h, z) before summing
        let mut c_hz = f_hz.clone();
        add_tensor_matrix_swapped(&mut c_hz, &f_za, &d.d_h);
        c_hz.add_assign(&transposed(&r_zh.left_multiply(&f_a)));

        let mut c_zh = f_hz;
        add_tensor_matrix(&mut c_zh, &f_ha, &d.d_z);
        c_zh.add_assign(&r_hz.left_multiply(&f_a));

        let mut c_zz = f_zz;
        add_tensor_matrix(&mut c_zz, &f_za, &d.d_z);
        c_zz.add_assign(&r_zz.left_multiply(&f_a));

        out[4] = c_hh.frobenius_sq();
        out[5] = c_hz.frobenius_sq();
        out[6] = c_zh.frobenius_sq();
        out[7] = c_zz.frobenius_sq();
        out[8] = sys.p.hessian(&h, t).frobenius_sq();
        out[9] = sys.p_bar.hessian(&h, t).frobenius_sq();
    }
    Ok(out)
}

/// Monte Carlo catalog over unperturbed rollouts. Second-order terms need
/// third derivatives of the value function and are skipped unless
/// `second_order` is set.
pub fn estimate_term_catalog(
    problem: &RolloutProblem,
    n_paths: usize,
    seed: u64,
    second_order: bool,
) -> Result<TermCatalog> {
    if n_paths == 0 {
        return Err(Error::InvalidArgument("catalog needs at least one path".into()));
    }
    let sys = &problem.system;
    let zero = Vector::zeros(sys.eps_dim(problem.target));
    let sups = ensemble(n_paths, seed, |_, s| {
        let bundle = problem.bundle(s)?;
        let path = rollout(sys, &problem.h0, &problem.z0, &zero, problem.target, &bundle)?;
        let mut sup = [0.0f64; N_TERMS];
        for n in 0..path.states.len() {
            let x = path.states.state(n);
            let vals = local_terms(problem, &x, &path.actions[n], problem.grid.time(n), second_order)?;
            for (s, v) in sup.iter_mut().zip(vals) {
                *s = s.max(v);
            }
        }
        Ok(sup)
    })?;
    let est = |k: usize| Estimate::from_samples(&sups.iter().map(|r| r[k]).collect::<Vec<_>>());
    let second = |k: usize| second_order.then(|| est(k));
    let (f_h, f_z, p_h, p_bar_h) = (est(0), est(1), est(2), est(3));
    let (f_hh, f_hz, f_zh, f_zz, p_hh, p_bar_hh) =
        (second(4), second(5), second(6), second(7), second(8), second(9));
    let h0 = second_order.then(|| {
        [&f_hh, &f_hz, &f_zh, &f_zz, &p_hh].iter().map(|e| e.unwrap().mean).sum::<f64>()
    });
    let h1 = p_bar_hh.map(|e| e.mean);
    Ok(TermCatalog {
        j0: (f_h.mean + f_z.mean + p_h.mean).exp(),
        j1: p_bar_h.mean.exp(),
        f_h,
        f_z,
        p_h,
        p_bar_h,
        f_hh,
        f_hz,
        f_zh,
        f_zz,
        p_hh,
        p_bar_hh,
        h0,
        h1,
        n_paths,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::tests::linear_system;
    use crate::divergence::PerturbTarget;
    use crate::field::AffineField;
    use crate::grid::TimeGrid;

    fn problem() -> RolloutProblem {
        RolloutProblem {
            system: linear_system(0.2),
            h0: Vector::from_vec(vec![0.5, -0.2]),
            z0: Vector::from_element(1, 0.3),
            grid: TimeGrid::new(1.0, 20).unwrap(),
            target: PerturbTarget::Latent,
        }
    }

    #[test]
    fn linear_system_catalog_matches_closed_form() {
        let c = estimate_term_catalog(&problem(), 4, 1, true).unwrap();
        // f_h + f_a W_h with W_h = [-0.5, 0.2], f_a = [0.2, 0.1]
        let fh = Matrix::from_row_slice(2, 2, &[-0.8 - 0.1, 0.1 + 0.04, 0.05 - 0.05, -0.5 + 0.02]);
        assert!((c.f_h.mean - fh.norm_squared()).abs() < 1e-10);
        let fz = Matrix::from_row_slice(2, 1, &[0.3 - 0.06, -0.2 - 0.03]);
        assert!((c.f_z.mean - fz.norm_squared()).abs() < 1e-10);
        assert!((c.p_h.mean - 0.25).abs() < 1e-12);
        assert!((c.p_bar_h.mean - 0.01).abs() < 1e-12);
        assert_eq!(c.h0, Some(0.0));
        assert_eq!(c.h1, Some(0.0));
        assert!((c.j0 - (c.f_h.mean + c.f_z.mean + 0.25).exp()).abs() < 1e-12);
    }

    #[test]
    fn action_free_drift_gives_the_plain_jacobian_norm() {
        let mut p = problem();
        p.system.f = AffineField::linear(Matrix::from_row_slice(2, 4, &[
            -0.8, 0.1, 0.3, 0.0,
            0.05, -0.5, -0.2, 0.0,
        ]))
        .shared();
        let c = estimate_term_catalog(&p, 3, 1, false).unwrap();
        assert!((c.f_h.mean - (0.64 + 0.01 + 0.0025 + 0.25)).abs() < 1e-12);
        assert!(c.f_h.stderr < 1e-15);
    }

    #[test]
    fn scaling_the_drift_jacobian_increases_j0() {
        let base = problem();
        let mut j0 = Vec::new();
        for scale in [0.5, 1.0, 2.0] {
            let mut p = base.clone();
            let a = base.system.f.jacobian(&Vector::zeros(4), 0.0) * scale;
            p.system.f = AffineField::linear(a).shared();
            j0.push(estimate_term_catalog(&p, 1000, 7, false).unwrap().j0);
        }
        assert!(j0[0] < j0[1] && j0[1] < j0[2], "{j0:?}");
    }

    #[test]
    fn first_order_catalog_has_no_bound() {
        let c = estimate_term_catalog(&problem(), 2, 1, false).unwrap();
        assert!(c.f_hh.is_none() && c.h0.is_none());
        assert!(bound_shape(&c, 0.1).is_err());
    }

    #[test]
    fn bound_shape_is_monotone_in_delta() {
        let c = estimate_term_catalog(&problem(), 2, 1, true).unwrap();
        let a = bound_shape(&c, 0.01).unwrap();
        let b = bound_shape(&c, 0.1).unwrap();
        assert!(b > a && a > 0.0);
    }
}
