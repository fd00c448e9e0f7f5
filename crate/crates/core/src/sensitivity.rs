//! Variational equations along an unperturbed path.
//!
//! Everything here is the exact derivative of the discrete Euler–Maruyama
//! map, so finite differences of coupled simulations agree with these
//! processes up to the next order in the perturbation, independently of
//! the step size.

use std::io::Write;

use crate::error::{check_dim, Error, Result};
use crate::field::{Matrix, Tensor3, Vector};
use crate::grid::{BrownianBundle, TimeGrid};
use crate::sde::{write_columns_csv, PerturbedSde, SdeSystem, Trajectory};

/// Threshold on `|Phi|_F |Phi^-1|_F` above which the fundamental matrix is
/// treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// How `Phi^-1` is carried along the path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InverseScheme {
    /// `Psi_{n+1} = Psi_n M_n^-1` with `M_n` the one-step propagator, solved
    /// by LU. `Psi_n Phi_n = I` up to rounding.
    #[default]
    StepPropagator,
    /// Euler–Maruyama on `dPsi = Psi(-A_0 + sum_k A_k A_k) dt - sum_k Psi A_k dB^k`.
    /// Consistent only to `O(dt^1/2)`.
    ItoEuler,
}

/// Coefficient Jacobians `A_0 = dg_0/dx`, `A_k = dg_k/dx` at one grid point.
struct LocalJacobians {
    drift: Matrix,
    diffusion: Vec<Option<Matrix>>,
}

fn local_jacobians(sys: &SdeSystem, x: &Vector, t: f64) -> LocalJacobians {
    LocalJacobians {
        drift: sys.drift.jacobian(x, t),
        diffusion: sys
            .diffusions
            .iter()
            .map(|g| (!g.is_zero()).then(|| g.jacobian(x, t)))
            .collect(),
    }
}

/// `M_n = I + A_0 dt + sum_k A_k dB^k_n`.
fn one_step_propagator(j: &LocalJacobians, bundle: &BrownianBundle, n: usize) -> Matrix {
    let d = j.drift.nrows();
    let dt = bundle.grid().dt();
    let mut m = Matrix::identity(d, d) + &j.drift * dt;
    for (k, a) in j.diffusion.iter().enumerate() {
        if let Some(a) = a {
            m += a * bundle.dw(n, k);
        }
    }
    m
}

fn check_inputs(sys: &SdeSystem, base: &Trajectory, bundle: &BrownianBundle) -> Result<()> {
    check_dim("base trajectory dimension", sys.dim(), base.dim())?;
    check_dim("Brownian components", sys.n_noise(), bundle.m())?;
    check_dim(
        "base trajectory length",
        bundle.grid().n_points(),
        base.len(),
    )?;
    Ok(())
}

fn finite_matrix(m: &Matrix, what: &'static str, step: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, step })
    }
}

fn finite_vector(v: &Vector, what: &'static str, step: usize) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, step })
    }
}

/// `Phi_n` and `Phi_n^-1` on every grid point.
#[derive(Clone, Debug)]
pub struct FundamentalMatrixPath {
    pub grid: TimeGrid,
    pub matrices: Vec<Matrix>,
    pub inverses: Vec<Matrix>,
}

impl FundamentalMatrixPath {
    /// `max_n |Phi_n^-1 Phi_n - I|_max`.
    pub fn inverse_defect(&self) -> f64 {
        self.matrices
            .iter()
            .zip(&self.inverses)
            .map(|(p, q)| {
                let d = p.nrows();
                (q * p - Matrix::identity(d, d)).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn last(&self) -> &Matrix {
        self.matrices.last().expect("non-empty path")
    }

    /// `max_n |Phi_n|_F^2`.
    pub fn sup_frobenius_sq(&self) -> f64 {
        self.matrices
            .iter()
            .map(|m| m.norm_squared())
            .fold(0.0, f64::max)
    }
}

pub fn integrate_fundamental_matrix(
    sys: &PerturbedSde,
    base: &Trajectory,
    bundle: &BrownianBundle,
) -> Result<FundamentalMatrixPath> {
    integrate_fundamental_matrix_with(&sys.base, base, bundle, InverseScheme::default())
}

/// Homogeneous linearised equation `dPhi = A_0 Phi dt + sum_k A_k Phi dB^k`,
/// `Phi_0 = I`, together with its inverse.
pub fn integrate_fundamental_matrix_with(
    sys: &SdeSystem,
    base: &Trajectory,
    bundle: &BrownianBundle,
    scheme: InverseScheme,
) -> Result<FundamentalMatrixPath> {
    check_inputs(sys, base, bundle)?;
    let grid = *bundle.grid();
    let d = sys.dim();
    let dt = grid.dt();
    let mut phi = Matrix::identity(d, d);
    let mut psi = Matrix::identity(d, d);
    let mut matrices = Vec::with_capacity(grid.n_points());
    let mut inverses = Vec::with_capacity(grid.n_points());
    matrices.push(phi.clone());
    inverses.push(psi.clone());
    for n in 0..grid.n_steps() {
        let x = base.state(n);
        let jac = local_jacobians(sys, &x, grid.time(n));
        let m = one_step_propagator(&jac, bundle, n);
        let next_phi = &m * &phi;
        let next_psi = match scheme {
            InverseScheme::StepPropagator => {
                // Psi M^-1 = (M^-T Psi^T)^T
                let lu = m.transpose().lu();
                match lu.solve(&psi.transpose()) {
                    Some(s) => s.transpose(),
                    None => {
                        return Err(Error::SingularFundamental {
                            step: n + 1,
                            condition: f64::INFINITY,
                        })
                    }
                }
            }
            InverseScheme::ItoEuler => {
                let mut gen = -&jac.drift * dt;
                for (k, a) in jac.diffusion.iter().enumerate() {
                    if let Some(a) = a {
                        gen += a * a * dt - a * bundle.dw(n, k);
                    }
                }
                &psi + &psi * gen
            }
        };
        finite_matrix(&next_phi, "fundamental matrix", n + 1)?;
        finite_matrix(&next_psi, "inverse fundamental matrix", n + 1)?;
        let condition = next_phi.norm() * next_psi.norm();
        if !(condition <= MAX_CONDITION) {
            return Err(Error::SingularFundamental {
                step: n + 1,
                condition,
            });
        }
        phi = next_phi;
        psi = next_psi;
        matrices.push(phi.clone());
        inverses.push(psi.clone());
    }
    Ok(FundamentalMatrixPath {
        grid,
        matrices,
        inverses,
    })
}

/// `xi^k_t = int Phi^-1 eta_k dB^k`, `xi~_t = int Phi^-1 eta_0 ds` and the
/// Itô correction `zeta_t = int Phi^-1 sum_k A_k eta_k ds`, all as
/// left-endpoint sums.
#[derive(Clone, Debug)]
pub struct XiProcessPath {
    pub grid: TimeGrid,
    pub xi: Vec<Trajectory>,
    pub xi_tilde: Trajectory,
    pub correction: Trajectory,
}

impl XiProcessPath {
    /// `sum_k xi^k_n`.
    pub fn xi_sum(&self, n: usize) -> Vector {
        let d = self.xi_tilde.dim();
        self.xi
            .iter()
            .fold(Vector::zeros(d), |acc, x| acc + x.state(n))
    }
}

pub fn integrate_xi(
    sys: &PerturbedSde,
    base: &Trajectory,
    phi: &FundamentalMatrixPath,
    bundle: &BrownianBundle,
) -> Result<XiProcessPath> {
    check_inputs(&sys.base, base, bundle)?;
    check_dim("fundamental matrix path", base.len(), phi.matrices.len())?;
    let grid = *bundle.grid();
    let d = sys.dim();
    let m = sys.n_noise();
    let dt = grid.dt();
    let mut xi = vec![Trajectory::new(grid, d); m];
    let mut xi_tilde = Trajectory::new(grid, d);
    let mut correction = Trajectory::new(grid, d);
    let mut cur = vec![Vector::zeros(d); m];
    let mut cur_tilde = Vector::zeros(d);
    let mut cur_corr = Vector::zeros(d);
    for n in 0..grid.n_steps() {
        let x = base.state(n);
        let t = grid.time(n);
        let psi = &phi.inverses[n];
        if !sys.drift_error.is_zero() {
            cur_tilde += psi * sys.drift_error.eval(&x, t) * dt;
        }
        let mut corr = Vector::zeros(d);
        let mut any_corr = false;
        for k in 0..m {
            let e = &sys.diffusion_errors[k];
            if e.is_zero() {
                continue;
            }
            let eta = e.eval(&x, t);
            cur[k] += psi * &eta * bundle.dw(n, k);
            let g = &sys.base.diffusions[k];
            if !g.is_zero() {
                corr += g.jacobian(&x, t) * &eta;
                any_corr = true;
            }
        }
        if any_corr {
            cur_corr += psi * corr * dt;
        }
        for k in 0..m {
            finite_vector(&cur[k], "xi process", n + 1)?;
            xi[k].set_state(n + 1, &cur[k]);
        }
        finite_vector(&cur_tilde, "xi tilde process", n + 1)?;
        xi_tilde.set_state(n + 1, &cur_tilde);
        correction.set_state(n + 1, &cur_corr);
    }
    Ok(XiProcessPath {
        grid,
        xi,
        xi_tilde,
        correction,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SensitivityKind {
    Epsilon,
    InitialValue,
}

/// Initial value of the second-order initial-value sensitivity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SecondOrderInit {
    /// `d^2 x_0 / dx_0^i dx_0^j = 0`, the derivative of the identity map.
    #[default]
    Zero,
    /// `e_j`, as printed for the second-order equation.
    UnitVector,
}

#[derive(Clone, Debug)]
pub struct SensitivityBundle {
    pub kind: SensitivityKind,
    pub base: Trajectory,
    /// Epsilon kind: one entry. Initial-value kind: one per coordinate `i`.
    pub first: Vec<Trajectory>,
    /// `((i, j), path)`; the epsilon kind has the single entry `(0, 0)`.
    pub second: Vec<((usize, usize), Trajectory)>,
}

impl SensitivityBundle {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut suffixes: Vec<String> = Vec::new();
        match self.kind {
            SensitivityKind::Epsilon => {
                suffixes.push(".d1".into());
                suffixes.push(".d2".into());
            }
            SensitivityKind::InitialValue => {
                suffixes.extend((0..self.first.len()).map(|i| format!(".d1.{i}")));
                suffixes.extend(self.second.iter().map(|((i, j), _)| format!(".d2.{i}.{j}")));
            }
        }
        let mut blocks: Vec<(&Trajectory, &str)> = vec![(&self.base, "")];
        let paths = self.first.iter().chain(self.second.iter().map(|(_, p)| p));
        for (p, s) in paths.zip(&suffixes) {
            blocks.push((p, s.as_str()));
        }
        write_columns_csv(w, self.base.grid(), &blocks)
    }
}

/// Which forcing terms drive a first/second-order epsilon sensitivity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Forcing {
    pub drift: bool,
    pub diffusion: bool,
}

pub(crate) const FULL: Forcing = Forcing {
    drift: true,
    diffusion: true,
};

/// First and second epsilon-derivatives of the Euler map for several
/// forcing selections, sharing one evaluation of the coefficient
/// derivatives per step. Returns `(first, second)` per selection.
pub(crate) fn epsilon_sensitivities_multi(
    sys: &PerturbedSde,
    base: &Trajectory,
    bundle: &BrownianBundle,
    selections: &[Forcing],
) -> Result<Vec<(Trajectory, Trajectory)>> {
    check_inputs(&sys.base, base, bundle)?;
    let grid = *bundle.grid();
    let d = sys.dim();
    let m = sys.n_noise();
    let dt = grid.dt();
    let ns = selections.len();
    let mut y = vec![Vector::zeros(d); ns];
    let mut w = vec![Vector::zeros(d); ns];
    let mut out: Vec<(Trajectory, Trajectory)> =
        vec![(Trajectory::new(grid, d), Trajectory::new(grid, d)); ns];
    let drift_err = !sys.drift_error.is_zero();
    for n in 0..grid.n_steps() {
        let x = base.state(n);
        let t = grid.time(n);
        // drift part
        let a0 = sys.base.drift.jacobian(&x, t);
        let h0 = sys.base.drift.hessian(&x, t);
        let (eta0, deta0) = if drift_err {
            (
                Some(sys.drift_error.eval(&x, t)),
                Some(sys.drift_error.jacobian(&x, t)),
            )
        } else {
            (None, None)
        };
        let mut ny: Vec<Vector> = Vec::with_capacity(ns);
        let mut nw: Vec<Vector> = Vec::with_capacity(ns);
        for s in 0..ns {
            let mut fy = &a0 * &y[s];
            let mut fw = h0.bilinear(&y[s], &y[s]) + &a0 * &w[s];
            if selections[s].drift {
                if let (Some(e), Some(de)) = (&eta0, &deta0) {
                    fy += e;
                    fw += de * &y[s] * 2.0;
                }
            }
            ny.push(&y[s] + fy * dt);
            nw.push(&w[s] + fw * dt);
        }
        for k in 0..m {
            let g = &sys.base.diffusions[k];
            let e = &sys.diffusion_errors[k];
            let has_g = !g.is_zero();
            let has_e = !e.is_zero();
            if !has_g && !has_e {
                continue;
            }
            let db = bundle.dw(n, k);
            let gk = has_g.then(|| (g.jacobian(&x, t), g.hessian(&x, t)));
            let ek = has_e.then(|| (e.eval(&x, t), e.jacobian(&x, t)));
            for s in 0..ns {
                let mut fy = Vector::zeros(d);
                let mut fw = Vector::zeros(d);
                if let Some((ak, hk)) = &gk {
                    fy += ak * &y[s];
                    fw += hk.bilinear(&y[s], &y[s]) + ak * &w[s];
                }
                if selections[s].diffusion {
                    if let Some((eta, deta)) = &ek {
                        fy += eta;
                        fw += deta * &y[s] * 2.0;
                    }
                }
                ny[s] += fy * db;
                nw[s] += fw * db;
            }
        }
        for s in 0..ns {
            finite_vector(&ny[s], "first-order sensitivity", n + 1)?;
            finite_vector(&nw[s], "second-order sensitivity", n + 1)?;
            out[s].0.set_state(n + 1, &ny[s]);
            out[s].1.set_state(n + 1, &nw[s]);
        }
        y = ny;
        w = nw;
    }
    Ok(out)
}

/// `dy = (A_0 y + eta_0) dt + sum_k (A_k y + eta_k) dB^k`, `y_0 = 0`, and
/// `dw = (H_0[y,y] + 2 eta_0' y + A_0 w) dt + sum_k (H_k[y,y] + 2 eta_k' y + A_k w) dB^k`, `w_0 = 0`.
pub fn integrate_epsilon_sensitivities(
    sys: &PerturbedSde,
    base: &Trajectory,
    bundle: &BrownianBundle,
) -> Result<SensitivityBundle> {
    let mut parts = epsilon_sensitivities_multi(sys, base, bundle, &[FULL])?;
    let (first, second) = parts.pop().expect("one selection");
    Ok(SensitivityBundle {
        kind: SensitivityKind::Epsilon,
        base: base.clone(),
        first: vec![first],
        second: vec![((0, 0), second)],
    })
}

/// Derivatives of the path with respect to the initial state.
///
/// First order: `d(d_i x) = A_0 d_i x dt + sum_k A_k d_i x dB^k`,
/// `d_i x(0) = e_i`. Second order, for each requested pair:
/// `d(d_ij x) = (H_0[d_i x, d_j x] + A_0 d_ij x) dt + sum_k (H_k[d_i x, d_j x] + A_k d_ij x) dB^k`.
pub fn integrate_initial_value_sensitivities(
    sys: &SdeSystem,
    base: &Trajectory,
    bundle: &BrownianBundle,
    pairs: &[(usize, usize)],
    init: SecondOrderInit,
) -> Result<SensitivityBundle> {
    check_inputs(sys, base, bundle)?;
    let grid = *bundle.grid();
    let d = sys.dim();
    let m = sys.n_noise();
    let dt = grid.dt();
    for &(i, j) in pairs {
        if i >= d || j >= d {
            return Err(Error::InvalidArgument(format!(
                "sensitivity pair ({i}, {j}) out of range for dimension {d}"
            )));
        }
    }
    let mut y = Matrix::identity(d, d);
    let mut w: Vec<Vector> = pairs
        .iter()
        .map(|&(_, j)| match init {
            SecondOrderInit::Zero => Vector::zeros(d),
            SecondOrderInit::UnitVector => {
                let mut e = Vector::zeros(d);
                e[j] = 1.0;
                e
            }
        })
        .collect();
    let mut first = vec![Trajectory::new(grid, d); d];
    for i in 0..d {
        first[i].set_state(0, &y.column(i).into_owned());
    }
    let mut second: Vec<((usize, usize), Trajectory)> = pairs
        .iter()
        .zip(&w)
        .map(|(&p, w0)| {
            let mut tr = Trajectory::new(grid, d);
            tr.set_state(0, w0);
            (p, tr)
        })
        .collect();
    for n in 0..grid.n_steps() {
        let x = base.state(n);
        let t = grid.time(n);
        let jac = local_jacobians(sys, &x, t);
        let m_n = one_step_propagator(&jac, bundle, n);
        let mut nw = Vec::with_capacity(pairs.len());
        if !pairs.is_empty() {
            let h0 = sys.drift.hessian(&x, t);
            let hk: Vec<Option<Tensor3>> = sys
                .diffusions
                .iter()
                .map(|g| (!g.is_zero()).then(|| g.hessian(&x, t)))
                .collect();
            for (p, &(i, j)) in pairs.iter().enumerate() {
                let yi = y.column(i).into_owned();
                let yj = y.column(j).into_owned();
                let mut next = &m_n * &w[p] + h0.bilinear(&yi, &yj) * dt;
                for k in 0..m {
                    if let Some(h) = &hk[k] {
                        next += h.bilinear(&yi, &yj) * bundle.dw(n, k);
                    }
                }
                finite_vector(&next, "second-order sensitivity", n + 1)?;
                nw.push(next);
            }
        }
        y = &m_n * y;
        finite_matrix(&y, "first-order sensitivity", n + 1)?;
        for i in 0..d {
            first[i].set_state(n + 1, &y.column(i).into_owned());
        }
        for (p, v) in nw.iter().enumerate() {
            second[p].1.set_state(n + 1, v);
        }
        if !pairs.is_empty() {
            w = nw;
        }
    }
    Ok(SensitivityBundle {
        kind: SensitivityKind::InitialValue,
        base: base.clone(),
        first,
        second,
    })
}

/// Rebuild the first-order epsilon sensitivity from
/// `Phi_t (xi~_t - zeta_t + sum_k xi^k_t)` and return its maximum absolute
/// deviation from the directly integrated process.
pub fn solution_formula_check(
    sys: &PerturbedSde,
    base: &Trajectory,
    phi: &FundamentalMatrixPath,
    xi: &XiProcessPath,
    bundle: &BrownianBundle,
) -> Result<f64> {
    let sens = integrate_epsilon_sensitivities(sys, base, bundle)?;
    let direct = &sens.first[0];
    let mut dev: f64 = 0.0;
    for n in 0..base.len() {
        let inner = xi.xi_tilde.state(n) - xi.correction.state(n) + xi.xi_sum(n);
        let formula = &phi.matrices[n] * inner;
        dev = dev.max((formula - direct.state(n)).amax());
    }
    Ok(dev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AffineField, Field, FnField, ZeroField};
    use std::sync::Arc;

    fn scalar(a: f64) -> Field {
        AffineField::linear(Matrix::from_element(1, 1, a)).shared()
    }

    fn constant(c: f64) -> Field {
        AffineField::constant(1, Vector::from_element(1, c)).shared()
    }

    fn nonlinear() -> PerturbedSde {
        let drift = FnField::scalar("drift", |x, _| -x + 0.5 * x.sin(), |x, _| -1.0 + 0.5 * x.cos(), |x, _| -0.5 * x.sin()).shared();
        let diff = FnField::scalar("diff", |x, _| 0.3 * x.cos(), |x, _| -0.3 * x.sin(), |x, _| -0.3 * x.cos()).shared();
        let sd = FnField::scalar("sd", |x, _| 0.5 + 0.2 * x.tanh(), |x, _| 0.2 / x.cosh().powi(2), |x, _| -0.4 * x.tanh() / x.cosh().powi(2)).shared();
        let s = FnField::scalar("s", |x, _| 0.4 * x.cos(), |x, _| -0.4 * x.sin(), |x, _| -0.4 * x.cos()).shared();
        PerturbedSde::new(SdeSystem::new(drift, vec![diff]).unwrap(), s, vec![sd]).unwrap()
    }

    #[test]
    fn zero_jacobians_give_identity() {
        let sys = PerturbedSde::unperturbed(
            SdeSystem::new(ZeroField::shared(2, 2), vec![constant_field_2d()]).unwrap(),
        );
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = BrownianBundle::generate(g, 1, 0).unwrap();
        let base = sys.integrate(&Vector::zeros(2), 0.0, &b).unwrap();
        let phi = integrate_fundamental_matrix(&sys, &base, &b).unwrap();
        for (p, q) in phi.matrices.iter().zip(&phi.inverses) {
            assert_eq!(*p, Matrix::identity(2, 2));
            assert_eq!(*q, Matrix::identity(2, 2));
        }
    }

    fn constant_field_2d() -> Field {
        AffineField::constant(2, Vector::from_vec(vec![0.3, -0.1])).shared()
    }

    #[test]
    fn step_inverse_stays_exact_and_ito_inverse_drifts() {
        let sys = nonlinear();
        let g = TimeGrid::new(1.0, 256).unwrap();
        let b = BrownianBundle::generate(g, 1, 4).unwrap();
        let base = sys.integrate(&Vector::from_element(1, 0.5), 0.0, &b).unwrap();
        let exact = integrate_fundamental_matrix(&sys, &base, &b).unwrap();
        assert!(exact.inverse_defect() < 1e-12);
        let ito = integrate_fundamental_matrix_with(&sys.base, &base, &b, InverseScheme::ItoEuler).unwrap();
        assert_eq!(ito.matrices, exact.matrices);
        assert!(ito.inverse_defect() > 1e-6);
    }

    #[test]
    fn singular_propagator_is_reported() {
        // M_n = 1 + a dt = 0 at a = -1/dt
        let sys = SdeSystem::new(scalar(-10.0), vec![]).unwrap();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let b = BrownianBundle::deterministic(g);
        let base = sys.integrate(&Vector::from_element(1, 1.0), &b).unwrap();
        let err = integrate_fundamental_matrix_with(&sys, &base, &b, InverseScheme::StepPropagator).unwrap_err();
        assert!(matches!(err, Error::SingularFundamental { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn zero_error_fields_give_zero_sensitivities() {
        let sys = PerturbedSde::unperturbed(nonlinear().base);
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = BrownianBundle::generate(g, 1, 1).unwrap();
        let base = sys.integrate(&Vector::from_element(1, 0.5), 0.0, &b).unwrap();
        let s = integrate_epsilon_sensitivities(&sys, &base, &b).unwrap();
        assert!(s.first[0].as_slice().iter().all(|v| *v == 0.0));
        assert!(s.second[0].1.as_slice().iter().all(|v| *v == 0.0));
        let phi = integrate_fundamental_matrix(&sys, &base, &b).unwrap();
        let xi = integrate_xi(&sys, &base, &phi, &b).unwrap();
        assert!(xi.xi[0].as_slice().iter().all(|v| *v == 0.0));
        assert!(xi.xi_tilde.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_system_with_constant_errors_has_no_second_order_term() {
        let sys = PerturbedSde::new(
            SdeSystem::new(scalar(-0.7), vec![scalar(0.4)]).unwrap(),
            constant(0.2),
            vec![constant(0.5)],
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = BrownianBundle::generate(g, 1, 2).unwrap();
        let base = sys.integrate(&Vector::from_element(1, 1.0), 0.0, &b).unwrap();
        let s = integrate_epsilon_sensitivities(&sys, &base, &b).unwrap();
        assert!(s.second[0].1.as_slice().iter().all(|v| *v == 0.0));
        assert!(s.first[0].last()[0] != 0.0);
    }

    #[test]
    fn sensitivities_are_derivatives_of_the_discrete_map() {
        // y = d/deps x^eps and w = d^2/deps^2 x^eps of the Euler map, so the
        // symmetric second difference matches w to O(h^2).
        let sys = nonlinear();
        let g = TimeGrid::new(1.0, 200).unwrap();
        let b = BrownianBundle::generate(g, 1, 8).unwrap();
        let x0 = Vector::from_element(1, 0.3);
        let base = sys.integrate(&x0, 0.0, &b).unwrap();
        let s = integrate_epsilon_sensitivities(&sys, &base, &b).unwrap();
        let h = 1e-3;
        let xp = sys.integrate(&x0, h, &b).unwrap().last()[0];
        let xm = sys.integrate(&x0, -h, &b).unwrap().last()[0];
        let x = base.last()[0];
        let d1 = (xp - xm) / (2.0 * h);
        let d2 = (xp - 2.0 * x + xm) / (h * h);
        assert!((d1 - s.first[0].last()[0]).abs() < 1e-5);
        assert!((d2 - s.second[0].1.last()[0]).abs() < 1e-3);
    }

    #[test]
    fn initial_value_first_order_is_the_fundamental_matrix() {
        let sys = nonlinear();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = BrownianBundle::generate(g, 1, 3).unwrap();
        let base = sys.integrate(&Vector::from_element(1, 0.2), 0.0, &b).unwrap();
        let iv = integrate_initial_value_sensitivities(&sys.base, &base, &b, &[(0, 0)], SecondOrderInit::Zero).unwrap();
        let phi = integrate_fundamental_matrix(&sys, &base, &b).unwrap();
        assert_eq!(iv.first[0].state(0)[0], 1.0);
        for n in 0..base.len() {
            assert!((iv.first[0].state(n)[0] - phi.matrices[n][(0, 0)]).abs() < 1e-14);
        }
        let e = integrate_initial_value_sensitivities(&sys.base, &base, &b, &[(0, 0)], SecondOrderInit::UnitVector).unwrap();
        assert_eq!(e.second[0].1.state(0)[0], 1.0);
        assert!(integrate_initial_value_sensitivities(&sys.base, &base, &b, &[(0, 3)], SecondOrderInit::Zero).is_err());
    }

    #[test]
    fn formula_matches_when_jacobians_vanish() {
        let sys = PerturbedSde::new(
            SdeSystem::new(ZeroField::shared(1, 1), vec![constant(0.3)]).unwrap(),
            constant(0.7),
            vec![Arc::new(ZeroField::new(1, 1))],
        )
        .unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = BrownianBundle::generate(g, 1, 0).unwrap();
        let base = sys.integrate(&Vector::zeros(1), 0.0, &b).unwrap();
        let phi = integrate_fundamental_matrix(&sys, &base, &b).unwrap();
        let xi = integrate_xi(&sys, &base, &phi, &b).unwrap();
        assert!((xi.xi_tilde.last()[0] - 0.7).abs() < 1e-12);
        assert!(solution_formula_check(&sys, &base, &phi, &xi, &b).unwrap() < 1e-10);
    }

    #[test]
    fn csv_export_suffixes_columns() {
        let sys = nonlinear();
        let g = TimeGrid::new(1.0, 4).unwrap();
        let b = BrownianBundle::generate(g, 1, 0).unwrap();
        let base = sys.integrate(&Vector::from_element(1, 0.2), 0.0, &b).unwrap();
        let s = integrate_epsilon_sensitivities(&sys, &base, &b).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x_0,x_0.d1,x_0.d2");
        assert_eq!(text.lines().count(), 6);
    }
}
