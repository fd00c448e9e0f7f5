//! Rollout-phase analysis: the sequence model and transition predictor
//! driven by a policy that maximises a value function, started from a
//! perturbed initial latent state.

mod analysis;
mod catalog;
pub mod policy;
pub mod qvalue;

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::field::{Field, SubspaceField, SumField, Vector, ZeroField};
use crate::grid::{BrownianBundle, TimeGrid};
use crate::ldm::PolicyClosedField;
use crate::sde::{SdeSystem, Trajectory};

pub use analysis::{
    divergence_scan, empirical_divergence, q_expansion_check, sensitivity_bound_check,
    unit_gaussian_mean_norm, DivergenceReport, DivergenceRow, DivergenceScan, EpsDistribution,
    QExpansionRow, QExpansionScan, SensitivityBoundCheck,
};
pub use catalog::{bound_shape, estimate_term_catalog, TermCatalog};
pub use policy::{newton_argmax, policy_derivatives, ArgmaxPolicy, PolicyDerivatives};
pub use qvalue::{stack_hza, FnQValue, QValue, QuadraticQ};

/// Which initial blocks the encoder error perturbs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbTarget {
    /// `z~_0 + eps`.
    #[default]
    Latent,
    /// `(h_0, z~_0) + eps`.
    HiddenAndLatent,
}

/// `dh = f(h, z~, rho(h, z~)) dt`, `dz~ = p(h) dt + p_bar(h) dB`, with
/// `rho(h, z~)` the local maximiser of `Q(h, z~, .)`. State order `(h, z~)`.
#[derive(Clone)]
pub struct RolloutSystem {
    pub dim_h: usize,
    pub dim_z: usize,
    pub dim_a: usize,
    pub f: Field,
    pub p: Field,
    pub p_bar: Field,
    pub q: Arc<dyn QValue>,
    /// Starting point for Newton when no previous action is available.
    pub action_init: Vector,
}

impl RolloutSystem {
    pub fn new(f: Field, p: Field, p_bar: Field, q: Arc<dyn QValue>) -> Result<Self> {
        let (dim_h, dim_z, dim_a) = q.dims();
        check_dim("sequence drift input", dim_h + dim_z + dim_a, f.dim_in())?;
        check_dim("sequence drift output", dim_h, f.dim_out())?;
        check_dim("predictor drift input", dim_h, p.dim_in())?;
        check_dim("predictor drift output", dim_z, p.dim_out())?;
        check_dim("predictor diffusion input", dim_h, p_bar.dim_in())?;
        check_dim("predictor diffusion output", dim_z, p_bar.dim_out())?;
        Ok(Self {
            dim_h,
            dim_z,
            dim_a,
            f,
            p,
            p_bar,
            q,
            action_init: Vector::zeros(dim_a),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim_h + self.dim_z
    }

    pub fn stack(&self, h: &Vector, z: &Vector) -> Vector {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(h.as_slice());
        v.extend_from_slice(z.as_slice());
        Vector::from_vec(v)
    }

    pub fn eps_dim(&self, target: PerturbTarget) -> usize {
        match target {
            PerturbTarget::Latent => self.dim_z,
            PerturbTarget::HiddenAndLatent => self.dim(),
        }
    }

    /// Coordinates of the state that the error perturbs.
    pub fn perturbed_coordinates(&self, target: PerturbTarget) -> Vec<usize> {
        match target {
            PerturbTarget::Latent => (self.dim_h..self.dim()).collect(),
            PerturbTarget::HiddenAndLatent => (0..self.dim()).collect(),
        }
    }

    pub fn perturbed_initial(&self, x0: &Vector, eps: &Vector, target: PerturbTarget) -> Result<Vector> {
        check_dim("initial error", self.eps_dim(target), eps.len())?;
        let mut x = x0.clone();
        for (k, i) in self.perturbed_coordinates(target).into_iter().enumerate() {
            x[i] += eps[k];
        }
        Ok(x)
    }

    /// Closed-loop system as a coefficient-field SDE (one Brownian component),
    /// for the variational equations. The policy is re-solved from
    /// `action_init` at every evaluation.
    pub fn closed_loop(&self) -> Result<SdeSystem> {
        let n = self.dim();
        let nh = self.dim_h;
        let policy: Field = Arc::new(ArgmaxPolicy::new(self.q.clone(), self.action_init.clone()));
        let seq: Field = Arc::new(PolicyClosedField::new(self.f.clone(), policy)?);
        let h_idx: Vec<usize> = (0..nh).collect();
        let drift = SumField::new(vec![
            SubspaceField::new(seq, (0..n).collect(), 0, n).shared(),
            SubspaceField::new(self.p.clone(), h_idx.clone(), nh, n).shared(),
        ]);
        let diffusion: Field = if self.p_bar.is_zero() {
            ZeroField::shared(n, n)
        } else {
            SubspaceField::new(self.p_bar.clone(), h_idx, nh, n).shared()
        };
        SdeSystem::new(Arc::new(drift), vec![diffusion])
    }
}

/// A rollout problem: system, unperturbed initial state and time grid.
#[derive(Clone)]
pub struct RolloutProblem {
    pub system: RolloutSystem,
    pub h0: Vector,
    pub z0: Vector,
    pub grid: TimeGrid,
    pub target: PerturbTarget,
}

impl RolloutProblem {
    pub fn x0(&self) -> Vector {
        self.system.stack(&self.h0, &self.z0)
    }

    pub fn bundle(&self, seed: u64) -> Result<BrownianBundle> {
        BrownianBundle::generate(self.grid, 1, seed)
    }
}

/// Rollout path with the actions taken at each step.
#[derive(Clone, Debug)]
pub struct RolloutPath {
    pub states: Trajectory,
    pub actions: Vec<Vector>,
}

/// Euler–Maruyama rollout from `(h0, z0 + eps)` (or `(h0, z0) + eps` for
/// [`PerturbTarget::HiddenAndLatent`]). The action at each step is found by
/// damped Newton warm-started at the previous action.
pub fn rollout(
    sys: &RolloutSystem,
    h0: &Vector,
    z0: &Vector,
    eps: &Vector,
    target: PerturbTarget,
    bundle: &BrownianBundle,
) -> Result<RolloutPath> {
    check_dim("initial hidden state", sys.dim_h, h0.len())?;
    check_dim("initial latent state", sys.dim_z, z0.len())?;
    check_dim("Brownian components", 1, bundle.m())?;
    let x0 = sys.perturbed_initial(&sys.stack(h0, z0), eps, target)?;
    let grid = *bundle.grid();
    let dt = grid.dt();
    let (nh, nz) = (sys.dim_h, sys.dim_z);
    let mut states = Trajectory::new(grid, sys.dim());
    states.set_state(0, &x0);
    let mut actions = Vec::with_capacity(grid.n_points());
    let mut x = x0;
    let mut warm = sys.action_init.clone();
    for n in 0..=grid.n_steps() {
        let t = grid.time(n);
        let (hs, zs) = x.as_slice().split_at(nh);
        let a = newton_argmax(sys.q.as_ref(), hs, zs, &warm)
            .map_err(|reason| Error::PolicyUndefined { step: n, reason })?;
        actions.push(a.clone());
        if n == grid.n_steps() {
            break;
        }
        let h = Vector::from_column_slice(hs);
        let u = stack_hza(hs, zs, a.as_slice());
        let dh = sys.f.eval(&u, t);
        let mut dz = sys.p.eval(&h, t) * dt;
        if !sys.p_bar.is_zero() {
            dz += sys.p_bar.eval(&h, t) * bundle.dw(n, 0);
        }
        let mut next = x.clone();
        for i in 0..nh {
            next[i] += dh[i] * dt;
        }
        for i in 0..nz {
            next[nh + i] += dz[i];
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "rollout state",
                step: n + 1,
            });
        }
        states.set_state(n + 1, &next);
        x = next;
        warm = a;
    }
    Ok(RolloutPath { states, actions })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::field::{AffineField, Matrix};
    use crate::error::Error;

    pub(crate) use crate::systems::linear_quadratic_rollout as linear_system;

    pub(crate) fn scalar_contraction() -> RolloutSystem {
        crate::systems::scalar_contraction(0.2)
    }

    #[test]
    fn zero_error_reproduces_the_unperturbed_rollout() {
        let sys = linear_system(0.2);
        let g = TimeGrid::new(1.0, 50).unwrap();
        let b = BrownianBundle::generate(g, 1, 3).unwrap();
        let h0 = Vector::from_vec(vec![0.5, -0.2]);
        let z0 = Vector::from_element(1, 0.3);
        let a = rollout(&sys, &h0, &z0, &Vector::zeros(1), PerturbTarget::Latent, &b).unwrap();
        let c = rollout(&sys, &h0, &z0, &Vector::zeros(1), PerturbTarget::Latent, &b).unwrap();
        assert_eq!(a.states, c.states);
    }

    #[test]
    fn deterministic_rollout_ignores_the_bundle() {
        let mut sys = linear_system(0.0);
        sys.p_bar = ZeroField::shared(2, 1);
        let g = TimeGrid::new(1.0, 50).unwrap();
        let h0 = Vector::from_vec(vec![0.5, -0.2]);
        let z0 = Vector::from_element(1, 0.3);
        let a = rollout(&sys, &h0, &z0, &Vector::zeros(1), PerturbTarget::Latent, &BrownianBundle::generate(g, 1, 1).unwrap()).unwrap();
        let b = rollout(&sys, &h0, &z0, &Vector::zeros(1), PerturbTarget::Latent, &BrownianBundle::generate(g, 1, 2).unwrap()).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn warm_started_rollout_matches_closed_loop_integration() {
        let sys = linear_system(0.2);
        let g = TimeGrid::new(1.0, 40).unwrap();
        let b = BrownianBundle::generate(g, 1, 5).unwrap();
        let h0 = Vector::from_vec(vec![0.5, -0.2]);
        let z0 = Vector::from_element(1, 0.3);
        let r = rollout(&sys, &h0, &z0, &Vector::zeros(1), PerturbTarget::Latent, &b).unwrap();
        let c = sys.closed_loop().unwrap().integrate(&sys.stack(&h0, &z0), &b).unwrap();
        assert!(r.states.max_abs_diff(&c) < 1e-13);
    }

    #[test]
    fn deterministic_linear_rollout_converges_to_the_matrix_exponential() {
        let mut sys = linear_system(0.0);
        sys.p_bar = ZeroField::shared(2, 1);
        // closed loop: f_h + f_a W_h, f_z + f_a W_z, p_h
        let a = Matrix::from_row_slice(3, 3, &[
            -0.9, 0.14, 0.24,
            0.0, -0.48, -0.23,
            0.4, -0.3, 0.0,
        ]);
        let x0 = Vector::from_vec(vec![0.5, -0.2, 0.3]);
        let exact = a.clone().exp() * &x0;
        let mut errs = Vec::new();
        for n in [50, 100, 200] {
            let g = TimeGrid::new(1.0, n).unwrap();
            let b = BrownianBundle::generate(g, 1, 0).unwrap();
            let r = rollout(&sys, &x0.rows(0, 2).into_owned(), &x0.rows(2, 1).into_owned(), &Vector::zeros(1), PerturbTarget::Latent, &b).unwrap();
            errs.push((r.states.last() - &exact).amax());
        }
        assert!(errs[0] < 5e-3);
        assert!((errs[0] / errs[1] - 2.0).abs() < 0.1 && (errs[1] / errs[2] - 2.0).abs() < 0.1, "{errs:?}");
    }

    #[test]
    fn non_concave_value_function_aborts_with_the_step() {
        let mut sys = linear_system(0.0);
        // -Q_aa = 1 - 4 z^2 loses definiteness once |z| > 1/2
        sys.q = FnQValue::new(
            (2, 1, 1),
            |u| -0.5 * u[3] * u[3] * (1.0 - 4.0 * u[2] * u[2]),
            |u| {
                let k = 1.0 - 4.0 * u[2] * u[2];
                Vector::from_vec(vec![0.0, 0.0, 4.0 * u[2] * u[3] * u[3], -u[3] * k])
            },
            |u| {
                let mut h = Matrix::zeros(4, 4);
                h[(2, 2)] = 4.0 * u[3] * u[3];
                h[(2, 3)] = 8.0 * u[2] * u[3];
                h[(3, 2)] = 8.0 * u[2] * u[3];
                h[(3, 3)] = -(1.0 - 4.0 * u[2] * u[2]);
                h
            },
        )
        .shared();
        sys.p = AffineField::linear(Matrix::from_row_slice(1, 2, &[1.5, 0.0])).shared();
        sys.f = AffineField::linear(Matrix::from_row_slice(2, 4, &[0.0; 8])).shared();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let b = BrownianBundle::generate(g, 1, 0).unwrap();
        let err = rollout(&sys, &Vector::from_vec(vec![1.0, 0.0]), &Vector::zeros(1), &Vector::zeros(1), PerturbTarget::Latent, &b).unwrap_err();
        // h stays at (1, 0), so z~_n = 0.15 n first exceeds 1/2 at n = 4
        match err {
            Error::PolicyUndefined { step, .. } => assert_eq!(step, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn perturbation_targets() {
        let sys = linear_system(0.0);
        let x0 = Vector::from_vec(vec![1.0, 2.0, 3.0]);
        let l = sys.perturbed_initial(&x0, &Vector::from_element(1, 0.5), PerturbTarget::Latent).unwrap();
        assert_eq!(l.as_slice(), &[1.0, 2.0, 3.5]);
        let hl = sys.perturbed_initial(&x0, &Vector::from_vec(vec![0.1, 0.2, 0.3]), PerturbTarget::HiddenAndLatent).unwrap();
        assert_eq!(hl.as_slice(), &[1.1, 2.2, 3.3]);
        assert!(sys.perturbed_initial(&x0, &Vector::zeros(3), PerturbTarget::Latent).is_err());
    }
}
