use std::io::Write;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::field::{CoefficientField, Field, Vector, ZeroField};
use crate::grid::{BrownianBundle, TimeGrid};

/// State path on a time grid, `states[n]` at `grid.time(n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            data: vec![0.0; grid.n_points() * dim],
        }
    }

    pub fn from_states(grid: TimeGrid, states: &[Vector]) -> Result<Self> {
        check_dim("trajectory length", grid.n_points(), states.len())?;
        let dim = states.first().map_or(0, |s| s.len());
        let mut tr = Self::new(grid, dim);
        for (n, s) in states.iter().enumerate() {
            check_dim("trajectory state", dim, s.len())?;
            tr.set_state(n, s);
        }
        Ok(tr)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.n_points()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn state(&self, n: usize) -> Vector {
        Vector::from_column_slice(self.row(n))
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn set_state(&mut self, n: usize, x: &Vector) {
        self.data[n * self.dim..(n + 1) * self.dim].copy_from_slice(x.as_slice());
    }

    pub fn last(&self) -> Vector {
        self.state(self.grid.n_steps())
    }

    /// Coordinate `i` along the whole path.
    pub fn component(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|n| self.data[n * self.dim + i]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `max_n |x_n - y_n|_inf`.
    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn csv_header(&self, suffix: &str) -> Vec<String> {
        (0..self.dim).map(|i| format!("x_{i}{suffix}")).collect()
    }

    /// CSV with header `t,x_0,...,x_{d-1}` and 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        write_columns_csv(w, &self.grid, &[(self, "")])
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write several trajectories on one grid side by side, each column block
/// suffixed as given.
pub fn write_columns_csv<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    blocks: &[(&Trajectory, &str)],
) -> Result<()> {
    let mut header = vec!["t".to_string()];
    for (tr, suffix) in blocks {
        check_dim("CSV block length", grid.n_points(), tr.len())?;
        header.extend(tr.csv_header(suffix));
    }
    writeln!(w, "{}", header.join(","))?;
    for n in 0..grid.n_points() {
        let mut row = vec![fmt_f64(grid.time(n))];
        for (tr, _) in blocks {
            row.extend(tr.row(n).iter().map(|v| fmt_f64(*v)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn check_finite(x: &Vector, what: &'static str, step: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, step })
    }
}

/// Itô SDE `dx = g_0(x,t) dt + sum_k g_k(x,t) dB^k`.
#[derive(Clone)]
pub struct SdeSystem {
    pub drift: Field,
    pub diffusions: Vec<Field>,
}

impl SdeSystem {
    pub fn new(drift: Field, diffusions: Vec<Field>) -> Result<Self> {
        let d = drift.dim_out();
        check_dim("drift input", d, drift.dim_in())?;
        for g in &diffusions {
            check_dim("diffusion input", d, g.dim_in())?;
            check_dim("diffusion output", d, g.dim_out())?;
        }
        Ok(Self { drift, diffusions })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim_out()
    }

    pub fn n_noise(&self) -> usize {
        self.diffusions.len()
    }

    pub fn integrate(&self, x0: &Vector, bundle: &BrownianBundle) -> Result<Trajectory> {
        euler_maruyama(self.drift.as_ref(), &self.diffusions, x0, bundle)
    }
}

/// Euler–Maruyama on the bundle's grid:
/// `x_{n+1} = x_n + g_0(x_n,t_n) dt + sum_k g_k(x_n,t_n) dB^k_n`.
pub fn euler_maruyama(
    drift: &dyn CoefficientField,
    diffusions: &[Field],
    x0: &Vector,
    bundle: &BrownianBundle,
) -> Result<Trajectory> {
    let d = x0.len();
    check_dim("drift input", d, drift.dim_in())?;
    check_dim("drift output", d, drift.dim_out())?;
    check_dim("number of diffusion fields", bundle.m(), diffusions.len())?;
    for g in diffusions {
        check_dim("diffusion input", d, g.dim_in())?;
        check_dim("diffusion output", d, g.dim_out())?;
    }
    let grid = *bundle.grid();
    let dt = grid.dt();
    let mut tr = Trajectory::new(grid, d);
    tr.set_state(0, x0);
    check_finite(x0, "initial state", 0)?;
    let mut x = x0.clone();
    for n in 0..grid.n_steps() {
        let t = grid.time(n);
        let mut next = &x + drift.eval(&x, t) * dt;
        for (k, g) in diffusions.iter().enumerate() {
            if g.is_zero() {
                continue;
            }
            next += g.eval(&x, t) * bundle.dw(n, k);
        }
        check_finite(&next, "state", n + 1)?;
        tr.set_state(n + 1, &next);
        x = next;
    }
    Ok(tr)
}

/// `dx = (g_0 + eps eta_0) dt + sum_k (g_k + eps eta_k) dB^k`.
///
/// `eta_0` is the drift error and `eta_k` the diffusion errors, already
/// expressed over the full state. Zero fields and `eps = 0` are skipped so
/// that the unperturbed path is bit-identical whatever the error fields.
#[derive(Clone)]
pub struct PerturbedSde {
    pub base: SdeSystem,
    pub drift_error: Field,
    pub diffusion_errors: Vec<Field>,
}

impl PerturbedSde {
    pub fn new(base: SdeSystem, drift_error: Field, diffusion_errors: Vec<Field>) -> Result<Self> {
        let d = base.dim();
        check_dim("drift error input", d, drift_error.dim_in())?;
        check_dim("drift error output", d, drift_error.dim_out())?;
        check_dim(
            "number of diffusion error fields",
            base.n_noise(),
            diffusion_errors.len(),
        )?;
        for e in &diffusion_errors {
            check_dim("diffusion error input", d, e.dim_in())?;
            check_dim("diffusion error output", d, e.dim_out())?;
        }
        Ok(Self {
            base,
            drift_error,
            diffusion_errors,
        })
    }

    /// System without any error terms.
    pub fn unperturbed(base: SdeSystem) -> Self {
        let d = base.dim();
        let m = base.n_noise();
        let zero: Field = Arc::new(ZeroField::new(d, d));
        Self {
            base,
            drift_error: zero.clone(),
            diffusion_errors: vec![zero; m],
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn n_noise(&self) -> usize {
        self.base.n_noise()
    }

    /// Same system with the diffusion errors removed (drift error kept).
    pub fn drift_error_only(&self) -> Self {
        let d = self.dim();
        let zero: Field = Arc::new(ZeroField::new(d, d));
        Self {
            base: self.base.clone(),
            drift_error: self.drift_error.clone(),
            diffusion_errors: vec![zero; self.n_noise()],
        }
    }

    /// Same system with the drift error removed.
    pub fn diffusion_error_only(&self) -> Self {
        let d = self.dim();
        Self {
            base: self.base.clone(),
            drift_error: Arc::new(ZeroField::new(d, d)),
            diffusion_errors: self.diffusion_errors.clone(),
        }
    }

    pub fn has_drift_error(&self) -> bool {
        !self.drift_error.is_zero()
    }

    pub fn has_diffusion_error(&self) -> bool {
        self.diffusion_errors.iter().any(|e| !e.is_zero())
    }

    pub fn integrate(&self, x0: &Vector, eps: f64, bundle: &BrownianBundle) -> Result<Trajectory> {
        let d = self.dim();
        check_dim("initial state", d, x0.len())?;
        check_dim("Brownian components", self.n_noise(), bundle.m())?;
        if !eps.is_finite() {
            return Err(Error::InvalidArgument(format!("epsilon must be finite, got {eps}")));
        }
        let grid = *bundle.grid();
        let dt = grid.dt();
        let use_drift_err = eps != 0.0 && !self.drift_error.is_zero();
        let mut tr = Trajectory::new(grid, d);
        check_finite(x0, "initial state", 0)?;
        tr.set_state(0, x0);
        let mut x = x0.clone();
        for n in 0..grid.n_steps() {
            let t = grid.time(n);
            let mut a = self.base.drift.eval(&x, t);
            if use_drift_err {
                a += self.drift_error.eval(&x, t) * eps;
            }
            let mut next = &x + a * dt;
            for k in 0..self.n_noise() {
                let g = &self.base.diffusions[k];
                let e = &self.diffusion_errors[k];
                let use_g = !g.is_zero();
                let use_e = eps != 0.0 && !e.is_zero();
                if !use_g && !use_e {
                    continue;
                }
                let mut b = if use_g {
                    g.eval(&x, t)
                } else {
                    Vector::zeros(d)
                };
                if use_e {
                    b += e.eval(&x, t) * eps;
                }
                next += b * bundle.dw(n, k);
            }
            check_finite(&next, "state", n + 1)?;
            tr.set_state(n + 1, &next);
            x = next;
        }
        Ok(tr)
    }
}
