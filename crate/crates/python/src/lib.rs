//! Python bindings: registry systems, sensitivities, regularizer estimates,
//! divergence scans and the toy world model.
//!
//! Specs and configs cross the boundary as plain dicts using the same keys as
//! the CLI's TOML files; results come back as lists and dicts.

use std::path::PathBuf;

use ldmsde::divergence::{
    divergence_scan, estimate_term_catalog, q_expansion_check, EpsDistribution, PerturbTarget,
    RolloutProblem as CoreRollout,
};
use ldmsde::regularization::{
    estimate_regularizer, taylor_residual_scan, RegOptions, RegProblem, ResidualVariant, TermConvention,
};
use ldmsde::sensitivity::{integrate_epsilon_sensitivities, integrate_fundamental_matrix};
use ldmsde::stats::{ensemble, Estimate};
use ldmsde::systems::{RolloutSpec, SdeCase, SdeSpec};
use ldmsde::worldmodel::{
    evaluate_robustness, rollout_openloop, train, EvalConfig, LdmModel, ModelDims, Perturbation, ToyEnv,
    TrainConfig,
};
use ldmsde::{BrownianBundle, Matrix, Trajectory, Vector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use pythonize::{depythonize, pythonize};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: ldmsde::Error) -> PyErr {
    match e {
        ldmsde::Error::InvalidArgument(_) | ldmsde::Error::InvalidGrid(_) | ldmsde::Error::Dimension { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>, what: &str) -> PyResult<T> {
    depythonize(obj).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn from_py_or_default<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>, what: &str) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), |o| from_py(o, what))
}

fn to_py<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<PyObject> {
    Ok(pythonize(py, v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?.unbind())
}

fn vec(v: &Vector) -> Vec<f64> {
    v.iter().copied().collect()
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn states(t: &Trajectory) -> Vec<Vec<f64>> {
    (0..t.len()).map(|n| t.row(n).to_vec()).collect()
}

fn estimate(py: Python<'_>, e: &Estimate) -> PyResult<PyObject> {
    let d = PyDict::new(py);
    d.set_item("mean", e.mean)?;
    d.set_item("stderr", e.stderr)?;
    Ok(d.into_any().unbind())
}

fn bundle(grid: ldmsde::TimeGrid, m: usize, seed: u64) -> ldmsde::Result<BrownianBundle> {
    if m == 0 {
        Ok(BrownianBundle::deterministic(grid))
    } else {
        BrownianBundle::generate(grid, m, seed)
    }
}

/// Uniform grid on `[0, t_end]`.
#[pyclass(frozen, module = "ldmsde")]
#[derive(Clone, Copy)]
struct TimeGrid {
    inner: ldmsde::TimeGrid,
}

#[pymethods]
impl TimeGrid {
    #[new]
    fn new(t_end: f64, n_steps: usize) -> PyResult<Self> {
        Ok(Self { inner: ldmsde::TimeGrid::new(t_end, n_steps).map_err(err)? })
    }

    #[getter]
    fn t_end(&self) -> f64 {
        self.inner.t_end()
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn times(&self) -> Vec<f64> {
        self.inner.times()
    }

    fn __repr__(&self) -> String {
        format!("TimeGrid(t_end={}, n_steps={})", self.inner.t_end(), self.inner.n_steps())
    }
}

/// Perturbed SDE from the registry, e.g. `System({"name": "gbm", "mu": 0.05})`.
#[pyclass(frozen, module = "ldmsde")]
struct System {
    spec: SdeSpec,
    case: SdeCase,
}

impl System {
    fn reg_problem(&self, grid: &TimeGrid) -> PyResult<RegProblem> {
        let c = self.spec.build().map_err(err)?;
        RegProblem::new(c.sde, c.x0, grid.inner, c.loss).map_err(err)
    }
}

fn convention(s: &str) -> PyResult<TermConvention> {
    match s {
        "exact" => Ok(TermConvention::Exact),
        "printed" => Ok(TermConvention::Printed),
        _ => Err(PyValueError::new_err(format!("convention: expected 'exact' or 'printed', got {s:?}"))),
    }
}

#[pymethods]
impl System {
    #[new]
    fn new(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        let spec: SdeSpec = from_py(spec, "system")?;
        let case = spec.build().map_err(err)?;
        Ok(Self { spec, case })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.case.name
    }

    #[getter]
    fn dim(&self) -> usize {
        self.case.x0.len()
    }

    #[getter]
    fn n_noise(&self) -> usize {
        self.case.sde.n_noise()
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        vec(&self.case.x0)
    }

    #[getter]
    fn spec(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.spec)
    }

    /// One Euler–Maruyama path; returns the state at every grid point.
    #[pyo3(signature = (grid, seed=0, epsilon=0.0))]
    fn simulate(&self, py: Python<'_>, grid: &TimeGrid, seed: u64, epsilon: f64) -> PyResult<Vec<Vec<f64>>> {
        let g = grid.inner;
        py.allow_threads(|| {
            let b = bundle(g, self.case.sde.n_noise(), seed)?;
            self.case.sde.integrate(&self.case.x0, epsilon, &b)
        })
        .map(|t| states(&t))
        .map_err(err)
    }

    /// Monte Carlo mean and standard error of the terminal state, per coordinate.
    #[pyo3(signature = (grid, n_paths, seed=0, epsilon=0.0))]
    fn terminal_moments(
        &self,
        py: Python<'_>,
        grid: &TimeGrid,
        n_paths: usize,
        seed: u64,
        epsilon: f64,
    ) -> PyResult<Vec<PyObject>> {
        let g = grid.inner;
        let m = self.case.sde.n_noise();
        let ends = py
            .allow_threads(|| {
                ensemble(n_paths, seed, |_, s| Ok(self.case.sde.integrate(&self.case.x0, epsilon, &bundle(g, m, s)?)?.last()))
            })
            .map_err(err)?;
        (0..self.case.x0.len())
            .map(|i| estimate(py, &Estimate::from_samples(&ends.iter().map(|x| x[i]).collect::<Vec<_>>())))
            .collect()
    }

    /// First and second epsilon-sensitivities along one path.
    #[pyo3(signature = (grid, seed=0))]
    fn epsilon_sensitivities(&self, py: Python<'_>, grid: &TimeGrid, seed: u64) -> PyResult<PyObject> {
        let g = grid.inner;
        let s = py
            .allow_threads(|| {
                let b = bundle(g, self.case.sde.n_noise(), seed)?;
                let base = self.case.sde.integrate(&self.case.x0, 0.0, &b)?;
                integrate_epsilon_sensitivities(&self.case.sde, &base, &b)
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("base", states(&s.base))?;
        d.set_item("first", states(&s.first[0]))?;
        d.set_item("second", states(&s.second[0].1))?;
        Ok(d.into_any().unbind())
    }

    /// Fundamental matrix along one path: terminal value, inverse defect and
    /// the sup of its squared Frobenius norm.
    #[pyo3(signature = (grid, seed=0))]
    fn fundamental_matrix(&self, py: Python<'_>, grid: &TimeGrid, seed: u64) -> PyResult<PyObject> {
        let g = grid.inner;
        let phi = py
            .allow_threads(|| {
                let b = bundle(g, self.case.sde.n_noise(), seed)?;
                let base = self.case.sde.integrate(&self.case.x0, 0.0, &b)?;
                integrate_fundamental_matrix(&self.case.sde, &base, &b)
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("last", rows(phi.last()))?;
        d.set_item("inverse_defect", phi.inverse_defect())?;
        d.set_item("sup_frobenius_sq", phi.sup_frobenius_sq())?;
        Ok(d.into_any().unbind())
    }

    /// Monte Carlo estimates of the regularization terms and `R`, `R~` at `epsilon`.
    #[pyo3(signature = (grid, t, epsilon, n_paths, seed=0, convention="exact", bias_half_s=false))]
    #[allow(clippy::too_many_arguments)]
    fn regularizer(
        &self,
        py: Python<'_>,
        grid: &TimeGrid,
        t: f64,
        epsilon: f64,
        n_paths: usize,
        seed: u64,
        convention: &str,
        bias_half_s: bool,
    ) -> PyResult<PyObject> {
        let problem = self.reg_problem(grid)?;
        let options = RegOptions { convention: self::convention(convention)?, bias_half_s };
        let report = py
            .allow_threads(|| estimate_regularizer(&problem, t, epsilon, n_paths, seed, options))
            .map_err(err)?;
        to_py(py, &report.to_json())
    }

    /// Taylor residual of the expected loss over an epsilon grid, with the
    /// fitted log-log slope.
    #[pyo3(signature = (grid, t, epsilons, n_paths, seed=0, include_bias=false, convention="exact", bias_half_s=false))]
    #[allow(clippy::too_many_arguments)]
    fn residual_scan(
        &self,
        py: Python<'_>,
        grid: &TimeGrid,
        t: f64,
        epsilons: Vec<f64>,
        n_paths: usize,
        seed: u64,
        include_bias: bool,
        convention: &str,
        bias_half_s: bool,
    ) -> PyResult<PyObject> {
        let problem = self.reg_problem(grid)?;
        let variant = ResidualVariant { convention: self::convention(convention)?, include_bias, bias_half_s };
        let scan = py
            .allow_threads(|| taylor_residual_scan(&problem, t, &epsilons, n_paths, seed, &[variant]))
            .map_err(err)?
            .remove(0);
        let d = PyDict::new(py);
        d.set_item("rows", to_py(py, &scan.rows)?)?;
        d.set_item("slope", scan.slope)?;
        Ok(d.into_any().unbind())
    }

    fn __repr__(&self) -> String {
        format!("System({:?})", self.spec)
    }
}

/// Policy-closed rollout system from the registry, e.g.
/// `RolloutProblem({"name": "smooth-nonlinear"}, grid, target="hidden_and_latent")`.
#[pyclass(frozen, module = "ldmsde")]
struct RolloutProblem {
    inner: CoreRollout,
}

#[pymethods]
impl RolloutProblem {
    #[new]
    #[pyo3(signature = (spec, grid, target=None))]
    fn new(spec: &Bound<'_, PyAny>, grid: &TimeGrid, target: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let spec: RolloutSpec = from_py(spec, "system")?;
        let target: PerturbTarget = from_py_or_default(target, "target")?;
        let (system, h0, z0) = spec.build();
        Ok(Self { inner: CoreRollout { system, h0, z0, grid: grid.inner, target } })
    }

    #[getter]
    fn dim_a(&self) -> usize {
        self.inner.system.dim_a
    }

    /// Jacobian-norm catalog of the closed-loop system.
    #[pyo3(signature = (n_paths, seed=0, second_order=true))]
    fn term_catalog(&self, py: Python<'_>, n_paths: usize, seed: u64, second_order: bool) -> PyResult<PyObject> {
        let c = py
            .allow_threads(|| estimate_term_catalog(&self.inner, n_paths, seed, second_order))
            .map_err(err)?;
        to_py(py, &c)
    }

    /// `d_eps` over a delta grid with the calibrated bound. `distribution`
    /// is a dict such as `{"kind": "sparse", "magnitude": 0.5}`; Gaussian by default.
    #[pyo3(signature = (deltas, n_paths, seed=0, distribution=None))]
    fn divergence_scan(
        &self,
        py: Python<'_>,
        deltas: Vec<f64>,
        n_paths: usize,
        seed: u64,
        distribution: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<PyObject> {
        let dist: EpsDistribution = match distribution {
            Some(d) => from_py(d, "distribution")?,
            None => EpsDistribution::Gaussian,
        };
        let (catalog, scan) = py
            .allow_threads(|| {
                let catalog = estimate_term_catalog(&self.inner, n_paths, seed, true)?;
                let scan = divergence_scan(&self.inner, dist, &deltas, n_paths, ldmsde::derive_seed(seed, 1), &catalog)?;
                Ok((catalog, scan))
            })
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("catalog", to_py(py, &catalog)?)?;
        d.set_item("holds", scan.holds())?;
        d.set_item("scan", to_py(py, &scan)?)?;
        Ok(d.into_any().unbind())
    }

    /// Residual of the second-order Q expansion at a fixed action.
    #[pyo3(signature = (deltas, action, t, n_paths, seed=0, distribution=None))]
    #[allow(clippy::too_many_arguments)]
    fn q_expansion(
        &self,
        py: Python<'_>,
        deltas: Vec<f64>,
        action: Vec<f64>,
        t: f64,
        n_paths: usize,
        seed: u64,
        distribution: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<PyObject> {
        let dist: EpsDistribution = match distribution {
            Some(d) => from_py(d, "distribution")?,
            None => EpsDistribution::Gaussian,
        };
        if action.len() != self.inner.system.dim_a {
            return Err(PyValueError::new_err(format!(
                "action: expected {} entries, got {}",
                self.inner.system.dim_a,
                action.len()
            )));
        }
        let a = Vector::from_vec(action);
        let scan = py
            .allow_threads(|| q_expansion_check(&self.inner, dist, &deltas, &a, t, n_paths, seed))
            .map_err(err)?;
        to_py(py, &scan)
    }
}

/// Trained latent world model.
#[pyclass(frozen, module = "ldmsde")]
struct WorldModel {
    inner: LdmModel,
}

#[pymethods]
impl WorldModel {
    /// Train on `env` (default pendulum). Returns the model and the loss log.
    #[staticmethod]
    #[pyo3(signature = (env=None, config=None))]
    fn train(
        py: Python<'_>,
        env: Option<&Bound<'_, PyAny>>,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<(Self, Vec<PyObject>)> {
        let env: ToyEnv = match env {
            Some(e) => from_py(e, "env")?,
            None => ToyEnv::pendulum(),
        };
        let config: TrainConfig = from_py_or_default(config, "config")?;
        let (model, log) = py.allow_threads(|| train(&env, &config)).map_err(err)?;
        let log = log
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("loss", r.loss)?;
                d.set_item("penalty", r.penalty)?;
                d.set_item("total", r.total)?;
                Ok(d.into_any().unbind())
            })
            .collect::<PyResult<_>>()?;
        Ok((Self { inner: model }, log))
    }

    /// Load a parameter file written by `save` or the CLI's `train`.
    #[staticmethod]
    fn load(dims: &Bound<'_, PyAny>, path: PathBuf) -> PyResult<Self> {
        let dims: ModelDims = from_py(dims, "dims")?;
        Ok(Self { inner: LdmModel::load(dims, &path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn dims(&self, py: Python<'_>) -> PyResult<PyObject> {
        to_py(py, &self.inner.dims)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    /// Closed-loop returns under each perturbation in `suite` plus the clean setting.
    #[pyo3(signature = (env=None, suite=None, config=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        env: Option<&Bound<'_, PyAny>>,
        suite: Option<&Bound<'_, PyAny>>,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<PyObject> {
        let env: ToyEnv = match env {
            Some(e) => from_py(e, "env")?,
            None => ToyEnv::pendulum(),
        };
        let suite: Vec<Perturbation> = from_py_or_default(suite, "suite")?;
        let config: EvalConfig = from_py_or_default(config, "config")?;
        let report = py.allow_threads(|| evaluate_robustness(&self.inner, &env, &suite, &config)).map_err(err)?;
        to_py(py, &report)
    }

    /// Open-loop imagination from the first observation under random actions.
    #[pyo3(signature = (horizon, seed=0, env=None))]
    fn rollout_openloop(
        &self,
        py: Python<'_>,
        horizon: usize,
        seed: u64,
        env: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<PyObject> {
        let env: ToyEnv = match env {
            Some(e) => from_py(e, "env")?,
            None => ToyEnv::pendulum(),
        };
        let r = py.allow_threads(|| rollout_openloop(&self.inner, &env, horizon, seed)).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("predicted", r.predicted.iter().map(vec).collect::<Vec<_>>())?;
        d.set_item("truth", r.truth.iter().map(vec).collect::<Vec<_>>())?;
        d.set_item("divergence", r.divergence)?;
        Ok(d.into_any().unbind())
    }
}

#[pyfunction]
fn derive_seed(master: u64, index: u64) -> u64 {
    ldmsde::derive_seed(master, index)
}

#[pymodule]
#[pyo3(name = "ldmsde")]
fn ldmsde_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TimeGrid>()?;
    m.add_class::<System>()?;
    m.add_class::<RolloutProblem>()?;
    m.add_class::<WorldModel>()?;
    m.add_function(wrap_pyfunction!(derive_seed, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
