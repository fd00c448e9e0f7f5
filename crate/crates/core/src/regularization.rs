//! Monte Carlo estimates of the explicit regularization and bias terms
//! induced by encoder errors, Taylor-residual scans and the fundamental
//! matrix norm bound.
//!
//! Two conventions are provided for the six terms. `Exact` builds them from
//! the first and second epsilon-sensitivities, so `R + R~` is the exact
//! second-order Taylor polynomial of the expected loss. `Printed` follows
//! the closed forms in `Phi`, `xi` and `xi~` literally: it omits the Itô
//! correction and the drift-Hessian contribution to the second-order term,
//! so its residual is in general only `O(eps)` or `O(eps^2)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_dim, Error, Result};
use crate::field::{CoefficientField, Matrix, Tensor3, Vector};
use crate::grid::{BrownianBundle, TimeGrid};
use crate::sde::{fmt_f64, PerturbedSde};
use crate::sensitivity::{
    epsilon_sensitivities_multi, integrate_fundamental_matrix, integrate_xi, Forcing, FULL,
};
use crate::stats::{ensemble, loglog_slope, Estimate};

/// Scalar loss with gradient and Hessian.
pub trait LossField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;
    fn hessian(&self, x: &Vector) -> Matrix;
}

/// `1/2 x^T H x + b^T x + c`.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    pub h: Matrix,
    pub b: Vector,
    pub c: f64,
}

impl QuadraticLoss {
    pub fn new(h: Matrix, b: Vector, c: f64) -> Self {
        assert_eq!(h.nrows(), h.ncols());
        assert_eq!(h.nrows(), b.len());
        let h = (&h + h.transpose()) * 0.5;
        Self { h, b, c }
    }

    /// `|x|^2`.
    pub fn squared_norm(dim: usize) -> Self {
        Self::new(Matrix::identity(dim, dim) * 2.0, Vector::zeros(dim), 0.0)
    }
}

impl LossField for QuadraticLoss {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn eval(&self, x: &Vector) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.b.dot(x) + self.c
    }
    fn gradient(&self, x: &Vector) -> Vector {
        &self.h * x + &self.b
    }
    fn hessian(&self, _x: &Vector) -> Matrix {
        self.h.clone()
    }
}

type ScalarFn = dyn Fn(&Vector) -> f64 + Send + Sync;
type GradFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type HessFn = dyn Fn(&Vector) -> Matrix + Send + Sync;

#[derive(Clone)]
pub struct FnLoss {
    dim: usize,
    f: Arc<ScalarFn>,
    g: Arc<GradFn>,
    h: Arc<HessFn>,
}

impl FnLoss {
    pub fn new(
        dim: usize,
        f: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        g: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        h: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Arc::new(f),
            g: Arc::new(g),
            h: Arc::new(h),
        }
    }
}

impl LossField for FnLoss {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &Vector) -> f64 {
        (self.f)(x)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        (self.g)(x)
    }
    fn hessian(&self, x: &Vector) -> Matrix {
        (self.h)(x)
    }
}

/// View of a loss as a one-output coefficient field, for derivative checks.
pub struct LossAsField<'a>(pub &'a dyn LossField);

impl CoefficientField for LossAsField<'_> {
    fn dim_in(&self) -> usize {
        self.0.dim()
    }
    fn dim_out(&self) -> usize {
        1
    }
    fn eval(&self, x: &Vector, _t: f64) -> Vector {
        Vector::from_element(1, self.0.eval(x))
    }
    fn jacobian(&self, x: &Vector, _t: f64) -> Matrix {
        Matrix::from_row_slice(1, self.0.dim(), self.0.gradient(x).as_slice())
    }
    fn hessian(&self, x: &Vector, _t: f64) -> Tensor3 {
        let mut t = Tensor3::zeros(1, self.0.dim(), self.0.dim());
        t.set_slice(0, &self.0.hessian(x));
        t
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermConvention {
    #[default]
    Exact,
    Printed,
}

/// The loss-expansion problem: a perturbed system started at `x0`,
/// observed at time `t` on `grid`.
#[derive(Clone)]
pub struct RegProblem {
    pub sde: PerturbedSde,
    pub x0: Vector,
    pub grid: TimeGrid,
    pub loss: Arc<dyn LossField>,
}

impl RegProblem {
    pub fn new(sde: PerturbedSde, x0: Vector, grid: TimeGrid, loss: Arc<dyn LossField>) -> Result<Self> {
        check_dim("initial state", sde.dim(), x0.len())?;
        check_dim("loss dimension", sde.dim(), loss.dim())?;
        Ok(Self { sde, x0, grid, loss })
    }

    /// Grid truncated at `t`, which must be a grid point.
    fn grid_until(&self, t: f64) -> Result<TimeGrid> {
        let n = self.grid.index_of(t)?;
        if n == 0 {
            return Err(Error::InvalidArgument("evaluation time must be positive".into()));
        }
        TimeGrid::new(self.grid.time(n), n)
    }
}

/// Per-path contributions to the six terms, for both conventions.
#[derive(Clone, Debug)]
struct PathTerms {
    exact: [f64; 6],
    printed: [f64; 6],
    /// Loss at the unperturbed endpoint.
    loss0: f64,
}

struct PathData {
    terms: PathTerms,
    bundle: BrownianBundle,
}

fn path_terms(problem: &RegProblem, grid: TimeGrid, seed: u64, printed: bool) -> Result<PathData> {
    let sde = &problem.sde;
    let bundle = if sde.n_noise() == 0 {
        BrownianBundle::deterministic(grid)
    } else {
        BrownianBundle::generate(grid, sde.n_noise(), seed)?
    };
    let base = sde.integrate(&problem.x0, 0.0, &bundle)?;
    let xt = base.last();
    let loss = &problem.loss;
    let grad = loss.gradient(&xt);
    let hess = loss.hessian(&xt);
    let quad = |a: &Vector, b: &Vector| a.dot(&(&hess * b));

    let drift_only = Forcing {
        drift: true,
        diffusion: false,
    };
    let diff_only = Forcing {
        drift: false,
        diffusion: true,
    };
    let parts = epsilon_sensitivities_multi(sde, &base, &bundle, &[drift_only, diff_only, FULL])?;
    let y_s = parts[0].0.last();
    let y_sb = parts[1].0.last();
    let w_sb = parts[1].1.last();
    let w = parts[2].1.last();
    let exact = [
        grad.dot(&y_sb),
        0.5 * grad.dot(&w_sb),
        quad(&y_sb, &y_sb),
        grad.dot(&y_s),
        0.5 * grad.dot(&(&w - &w_sb)),
        quad(&y_s, &y_sb) + 0.5 * quad(&y_s, &y_s),
    ];

    let printed = if printed {
        printed_terms(sde, &base, &bundle, &grad, &hess)?
    } else {
        [0.0; 6]
    };
    Ok(PathData {
        terms: PathTerms {
            exact,
            printed,
            loss0: loss.eval(&xt),
        },
        bundle,
    })
}

/// Literal closed forms in terms of `Phi`, `xi^k`, `xi~`.
fn printed_terms(
    sde: &PerturbedSde,
    base: &crate::sde::Trajectory,
    bundle: &BrownianBundle,
    grad: &Vector,
    hess: &Matrix,
) -> Result<[f64; 6]> {
    let phi = integrate_fundamental_matrix(sde, base, bundle)?;
    let xi = integrate_xi(sde, base, &phi, bundle)?;
    let grid = bundle.grid();
    let d = sde.dim();
    let dt = grid.dt();
    // int Phi^-1 H^k dB^k and int Phi^-1 H^0 ds, H^k = d^2 g_k [xi, xi], xi = sum_k xi^k
    let mut q_acc = Vector::zeros(d);
    let mut qt_acc = Vector::zeros(d);
    let has_diff_err = sde.has_diffusion_error();
    for n in 0..grid.n_steps() {
        if !has_diff_err {
            break;
        }
        let x = base.state(n);
        let t = grid.time(n);
        let s = xi.xi_sum(n);
        let psi = &phi.inverses[n];
        qt_acc += psi * sde.base.drift.hessian(&x, t).bilinear(&s, &s) * dt;
        for (k, g) in sde.base.diffusions.iter().enumerate() {
            if g.is_zero() {
                continue;
            }
            q_acc += psi * g.hessian(&x, t).bilinear(&s, &s) * bundle.dw(n, k);
        }
    }
    let nt = grid.n_steps();
    let phit = &phi.matrices[nt];
    let u = phit * xi.xi_sum(nt);
    let ut = phit * xi.xi_tilde.state(nt);
    let mut s_tilde = 0.0;
    for k in 0..sde.n_noise() {
        let uk = phit * xi.xi[k].state(nt);
        s_tilde += ut.dot(&(hess * uk));
    }
    Ok([
        grad.dot(&u),
        grad.dot(&(phit * q_acc)),
        u.dot(&(hess * &u)),
        grad.dot(&ut),
        grad.dot(&(phit * qt_acc)),
        s_tilde,
    ])
}

/// Estimates of `P, Q, S, P~, Q~, S~`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermEstimates {
    pub p: Estimate,
    pub q: Estimate,
    pub s: Estimate,
    pub p_tilde: Estimate,
    pub q_tilde: Estimate,
    pub s_tilde: Estimate,
}

impl TermEstimates {
    fn from_rows(rows: &[[f64; 6]]) -> Self {
        let col = |j: usize| Estimate::from_samples(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
        Self {
            p: col(0),
            q: col(1),
            s: col(2),
            p_tilde: col(3),
            q_tilde: col(4),
            s_tilde: col(5),
        }
    }
}

/// `R = eps P + eps^2 (Q + S/2)`.
pub fn assemble_r(p: f64, q: f64, s: f64, eps: f64) -> f64 {
    eps * p + eps * eps * (q + 0.5 * s)
}

/// `R~ = eps P~ + eps^2 (Q~ + S~)`, or with `S~/2` when `half_s` is set.
pub fn assemble_r_tilde(p: f64, q: f64, s: f64, eps: f64, half_s: bool) -> f64 {
    let sf = if half_s { 0.5 } else { 1.0 };
    eps * p + eps * eps * (q + sf * s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegOptions {
    pub convention: TermConvention,
    /// Apply `1/2` to `S~` in `R~`.
    pub bias_half_s: bool,
}

impl Default for RegOptions {
    fn default() -> Self {
        Self {
            convention: TermConvention::Exact,
            bias_half_s: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegularizationReport {
    pub terms: TermEstimates,
    pub r: f64,
    pub r_tilde: f64,
    pub epsilon: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub t: f64,
    pub options: RegOptions,
}

impl RegularizationReport {
    pub fn to_json(&self) -> serde_json::Value {
        let t = &self.terms;
        json!({
            "P": t.p.mean, "Q": t.q.mean, "S": t.s.mean,
            "P_tilde": t.p_tilde.mean, "Q_tilde": t.q_tilde.mean, "S_tilde": t.s_tilde.mean,
            "R": self.r, "R_tilde": self.r_tilde,
            "stderr_P": t.p.stderr, "stderr_Q": t.q.stderr, "stderr_S": t.s.stderr,
            "stderr_P_tilde": t.p_tilde.stderr, "stderr_Q_tilde": t.q_tilde.stderr,
            "stderr_S_tilde": t.s_tilde.stderr,
            "epsilon": self.epsilon, "n_paths": self.n_paths, "seed": self.seed,
            "t": self.t,
            "convention": self.options.convention,
            "bias_half_s": self.options.bias_half_s,
        })
    }
}

fn select(terms: &PathTerms, c: TermConvention) -> &[f64; 6] {
    match c {
        TermConvention::Exact => &terms.exact,
        TermConvention::Printed => &terms.printed,
    }
}

pub fn estimate_regularizer(
    problem: &RegProblem,
    t: f64,
    epsilon: f64,
    n_paths: usize,
    seed: u64,
    options: RegOptions,
) -> Result<RegularizationReport> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("n_paths must be at least 2".into()));
    }
    let grid = problem.grid_until(t)?;
    let printed = options.convention == TermConvention::Printed;
    let rows = ensemble(n_paths, seed, |_, s| {
        path_terms(problem, grid, s, printed).map(|d| *select(&d.terms, options.convention))
    })?;
    let terms = TermEstimates::from_rows(&rows);
    Ok(RegularizationReport {
        r: assemble_r(terms.p.mean, terms.q.mean, terms.s.mean, epsilon),
        r_tilde: assemble_r_tilde(
            terms.p_tilde.mean,
            terms.q_tilde.mean,
            terms.s_tilde.mean,
            epsilon,
            options.bias_half_s,
        ),
        terms,
        epsilon,
        n_paths,
        seed,
        t: grid.t_end(),
        options,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub epsilon: f64,
    pub residual: f64,
    pub stderr: f64,
}

/// Variant of the predicted expansion used in a residual scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualVariant {
    pub convention: TermConvention,
    pub include_bias: bool,
    pub bias_half_s: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualScan {
    pub variant: ResidualVariant,
    pub rows: Vec<ResidualRow>,
    /// Log-log slope over the strictly positive epsilon entries.
    pub slope: Option<f64>,
}

impl ResidualScan {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,residual,stderr\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{}\n",
                fmt_f64(r.epsilon),
                fmt_f64(r.residual),
                fmt_f64(r.stderr)
            ));
        }
        s
    }
}

/// `|E L(x^eps) - E L(x^0) - R(eps) [- R~(eps)]|` on common random numbers:
/// every path's perturbed runs share that path's Brownian bundle.
///
/// Returns one scan per requested variant; all variants reuse the same
/// simulations.
pub fn taylor_residual_scan(
    problem: &RegProblem,
    t: f64,
    epsilon_grid: &[f64],
    n_paths: usize,
    seed: u64,
    variants: &[ResidualVariant],
) -> Result<Vec<ResidualScan>> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("n_paths must be at least 2".into()));
    }
    if epsilon_grid.windows(2).any(|w| w[1] < w[0]) || epsilon_grid.iter().any(|e| !(*e >= 0.0)) {
        return Err(Error::InvalidArgument(
            "epsilon grid must be sorted and non-negative".into(),
        ));
    }
    let grid = problem.grid_until(t)?;
    let printed = variants.iter().any(|v| v.convention == TermConvention::Printed);
    let nv = variants.len();
    let ne = epsilon_grid.len();
    // per path: [variant][epsilon] differences
    let per_path = ensemble(n_paths, seed, |_, s| {
        let data = path_terms(problem, grid, s, printed)?;
        let mut out = vec![0.0; nv * ne];
        for (j, &eps) in epsilon_grid.iter().enumerate() {
            let delta = if eps == 0.0 {
                0.0
            } else {
                let xe = problem.sde.integrate(&problem.x0, eps, &data.bundle)?;
                problem.loss.eval(&xe.last()) - data.terms.loss0
            };
            for (v, var) in variants.iter().enumerate() {
                let c = select(&data.terms, var.convention);
                let mut pred = assemble_r(c[0], c[1], c[2], eps);
                if var.include_bias {
                    pred += assemble_r_tilde(c[3], c[4], c[5], eps, var.bias_half_s);
                }
                out[v * ne + j] = delta - pred;
            }
        }
        Ok(out)
    })?;
    let mut scans = Vec::with_capacity(nv);
    for (v, var) in variants.iter().enumerate() {
        let mut rows = Vec::with_capacity(ne);
        for (j, &eps) in epsilon_grid.iter().enumerate() {
            let col: Vec<f64> = per_path.iter().map(|r| r[v * ne + j]).collect();
            let e = Estimate::from_samples(&col);
            rows.push(ResidualRow {
                epsilon: eps,
                residual: e.mean.abs(),
                stderr: e.stderr,
            });
        }
        let fit: Vec<&ResidualRow> = rows.iter().filter(|r| r.epsilon > 0.0).collect();
        let slope = loglog_slope(
            &fit.iter().map(|r| r.epsilon).collect::<Vec<_>>(),
            &fit.iter().map(|r| r.residual).collect::<Vec<_>>(),
        )
        .ok();
        scans.push(ResidualScan {
            variant: *var,
            rows,
            slope,
        });
    }
    Ok(scans)
}

/// Both sides of the fundamental matrix norm bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// `E max_n |Phi_n|_F^2`.
    pub lhs: Estimate,
    /// `E max_n |dg_k/dx|_F^2` for the drift (first) and each diffusion.
    pub jacobian_terms: Vec<Estimate>,
    pub c: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// `sum_k C exp(C J_k)`.
pub fn bound_rhs(c: f64, jacobian_terms: &[f64]) -> f64 {
    jacobian_terms.iter().map(|j| c * (c * j).exp()).sum()
}

/// Smallest `C >= 0` with `sum_k C exp(C J_k) >= lhs`, found by bisection
/// (the right side is increasing in `C`).
pub fn calibrate_bound_constant(lhs: f64, jacobian_terms: &[f64]) -> Result<f64> {
    if jacobian_terms.is_empty() || !(lhs >= 0.0) {
        return Err(Error::InvalidArgument(
            "calibration needs at least one term and a non-negative target".into(),
        ));
    }
    if lhs == 0.0 {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    while bound_rhs(hi, jacobian_terms) < lhs {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::InvalidArgument("calibration did not bracket".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if bound_rhs(mid, jacobian_terms) >= lhs {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Empirical sides of the bound for the unperturbed system. With `c = None`
/// the constant is calibrated on this system so that the bound is tight.
pub fn fundamental_matrix_bound_check(
    sde: &PerturbedSde,
    x0: &Vector,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    c: Option<f64>,
) -> Result<BoundCheck> {
    if n_paths < 2 {
        return Err(Error::InvalidArgument("n_paths must be at least 2".into()));
    }
    let m = sde.n_noise();
    let rows = ensemble(n_paths, seed, |_, s| {
        let bundle = if m == 0 {
            BrownianBundle::deterministic(grid)
        } else {
            BrownianBundle::generate(grid, m, s)?
        };
        let base = sde.integrate(x0, 0.0, &bundle)?;
        let phi = integrate_fundamental_matrix(sde, &base, &bundle)?;
        let mut row = vec![phi.sup_frobenius_sq()];
        let mut sup = vec![0.0f64; m + 1];
        for n in 0..grid.n_points() {
            let x = base.state(n);
            let t = grid.time(n);
            sup[0] = sup[0].max(sde.base.drift.jacobian(&x, t).norm_squared());
            for (k, g) in sde.base.diffusions.iter().enumerate() {
                if !g.is_zero() {
                    sup[k + 1] = sup[k + 1].max(g.jacobian(&x, t).norm_squared());
                }
            }
        }
        row.extend(sup);
        Ok(row)
    })?;
    let cols = crate::stats::column_estimates(&rows);
    let lhs = cols[0];
    let jacobian_terms = cols[1..].to_vec();
    let means: Vec<f64> = jacobian_terms.iter().map(|e| e.mean).collect();
    let c = match c {
        Some(c) => c,
        None => calibrate_bound_constant(lhs.mean, &means)?,
    };
    let rhs = bound_rhs(c, &means);
    Ok(BoundCheck {
        lhs,
        jacobian_terms,
        c,
        rhs,
        holds: lhs.mean <= rhs * (1.0 + 1e-12),
    })
}
