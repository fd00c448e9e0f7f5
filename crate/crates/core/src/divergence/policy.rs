use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{CoefficientField, Matrix, Tensor3, Vector};

use super::qvalue::{stack_hza, QValue};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

fn split(q: &dyn QValue) -> (usize, usize, usize) {
    q.dims()
}

/// `d^2Q/da^2` block and its negated Cholesky factorisation, if it exists.
fn action_hessian(q: &dyn QValue, u: &Vector) -> (Matrix, Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>) {
    let (nh, nz, na) = split(q);
    let off = nh + nz;
    let h = q.hessian(u).view((off, off), (na, na)).into_owned();
    let chol = (-&h).cholesky();
    (h, chol)
}

/// Local maximiser of `a -> Q(h, z, a)` by damped Newton from `init`.
///
/// Converged when `|dQ/da| <= 1e-10`; one further undamped step is then
/// taken so the result is accurate to rounding and independent of the
/// starting point. Fails if `d^2Q/da^2` is not negative definite at an
/// iterate or the iteration does not converge.
pub fn newton_argmax(q: &dyn QValue, h: &[f64], z: &[f64], init: &Vector) -> Result<Vector, String> {
    let (nh, nz, na) = split(q);
    let off = nh + nz;
    let mut a = init.clone();
    for _ in 0..NEWTON_MAX_ITER {
        let u = stack_hza(h, z, a.as_slice());
        let g = q.gradient(&u).rows(off, na).into_owned();
        let (_, chol) = action_hessian(q, &u);
        let chol = chol.ok_or_else(|| "action Hessian is not negative definite".to_string())?;
        let step = chol.solve(&g);
        if g.norm() <= NEWTON_TOL {
            let polished = &a + &step;
            let up = stack_hza(h, z, polished.as_slice());
            let gp = q.gradient(&up).rows(off, na).norm();
            return Ok(if gp <= g.norm() { polished } else { a });
        }
        let q0 = q.eval(&u);
        let slope = g.dot(&step);
        // close to the optimum Q changes are below rounding and Armijo holds
        // with equality for any t, so judge the full step by the gradient
        let full = &a + &step;
        let uf = stack_hza(h, z, full.as_slice());
        let gf = q.gradient(&uf).rows(off, na).norm();
        if gf < 0.5 * g.norm() && q.eval(&uf) >= q0 - 1e-12 * (1.0 + q0.abs()) {
            a = full;
        } else {
            let mut t = 1.0;
            for _ in 0..40 {
                let cand = &a + &step * t;
                let qc = q.eval(&stack_hza(h, z, cand.as_slice()));
                if qc >= q0 + 1e-4 * t * slope {
                    break;
                }
                t *= 0.5;
            }
            a += step * t;
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err("Newton iterate became non-finite".into());
        }
    }
    Err(format!("Newton did not converge in {NEWTON_MAX_ITER} iterations"))
}

/// `rho` and its derivatives at one state.
#[derive(Clone, Debug)]
pub struct PolicyDerivatives {
    pub rho: Vector,
    /// `[dim_a x dim_h]`.
    pub d_h: Matrix,
    /// `[dim_a x dim_z]`.
    pub d_z: Matrix,
    /// `[c, i, j] = d^2 rho_c / dh_i dh_j`.
    pub d_hh: Option<Tensor3>,
    /// `[c, i, j] = d^2 rho_c / dh_i dz_j`.
    pub d_hz: Option<Tensor3>,
    /// `[c, i, j] = d^2 rho_c / dz_i dh_j`.
    pub d_zh: Option<Tensor3>,
    pub d_zz: Option<Tensor3>,
    /// Full `[dim_a x (dim_h + dim_z)]` Jacobian.
    pub d_v: Matrix,
    /// Full second derivative over `v = (h, z)`.
    pub d_vv: Option<Tensor3>,
}

pub(crate) fn sub_tensor(t: &Tensor3, r0: usize, n0: usize, r1: usize, n1: usize, r2: usize, n2: usize) -> Tensor3 {
    let mut out = Tensor3::zeros(n0, n1, n2);
    for a in 0..n0 {
        for b in 0..n1 {
            for c in 0..n2 {
                out.set(a, b, c, t.get(r0 + a, r1 + b, r2 + c));
            }
        }
    }
    out
}

/// Derivatives at a known maximiser `rho` by the implicit function theorem:
/// `d_v rho = -Q_aa^-1 Q_av` and, with `W = [I; d_v rho]`,
/// `d_vv rho = -Q_aa^-1 D^3Q[e_a, W., W.]`.
pub fn derivatives_at(q: &dyn QValue, h: &[f64], z: &[f64], rho: Vector, second: bool) -> Result<PolicyDerivatives> {
    let (nh, nz, na) = split(q);
    let nv = nh + nz;
    let u = stack_hza(h, z, rho.as_slice());
    let hess = q.hessian(&u);
    let qaa = hess.view((nv, nv), (na, na)).into_owned();
    let qav = hess.view((nv, 0), (na, nv)).into_owned();
    let lu = qaa.clone().lu();
    let d_v = -lu.solve(&qav).ok_or(Error::SingularActionHessian)?;
    let inv = lu.try_inverse().ok_or(Error::SingularActionHessian)?;
    let d_vv = if second {
        let t = q.third(&u).ok_or_else(|| {
            Error::InvalidArgument("second-order policy derivatives need third derivatives of Q".into())
        })?;
        let n = nv + na;
        let ta = sub_tensor(&t, nv, na, 0, n, 0, n);
        let mut w = Matrix::zeros(n, nv);
        w.view_mut((0, 0), (nv, nv)).fill_with_identity();
        w.view_mut((nv, 0), (na, nv)).copy_from(&d_v);
        Some(ta.pullback(&w, &w).left_multiply(&(-inv)))
    } else {
        None
    };
    let d_h = d_v.columns(0, nh).into_owned();
    let d_z = d_v.columns(nh, nz).into_owned();
    let blocks = d_vv.as_ref().map(|t| {
        (
            sub_tensor(t, 0, na, 0, nh, 0, nh),
            sub_tensor(t, 0, na, 0, nh, nh, nz),
            sub_tensor(t, 0, na, nh, nz, 0, nh),
            sub_tensor(t, 0, na, nh, nz, nh, nz),
        )
    });
    let (d_hh, d_hz, d_zh, d_zz) = match blocks {
        Some((a, b, c, d)) => (Some(a), Some(b), Some(c), Some(d)),
        None => (None, None, None, None),
    };
    Ok(PolicyDerivatives {
        rho,
        d_h,
        d_z,
        d_hh,
        d_hz,
        d_zh,
        d_zz,
        d_v,
        d_vv,
    })
}

/// Maximise `Q(h, z, .)` from `init`, check the action Hessian and return
/// `rho` with its first (and, if requested, second) derivatives.
pub fn policy_derivatives(
    q: &dyn QValue,
    h: &[f64],
    z: &[f64],
    init: &Vector,
    second: bool,
) -> Result<PolicyDerivatives> {
    let rho = newton_argmax(q, h, z, init).map_err(|reason| Error::PolicyUndefined { step: 0, reason })?;
    derivatives_at(q, h, z, rho, second)
}

/// The maximiser as a coefficient field over `v = (h, z)`; every evaluation
/// runs Newton from `init`. Points where the policy is undefined evaluate
/// to NaN, which the integrators report as a non-finite state.
#[derive(Clone)]
pub struct ArgmaxPolicy {
    q: Arc<dyn QValue>,
    init: Vector,
}

impl ArgmaxPolicy {
    pub fn new(q: Arc<dyn QValue>, init: Vector) -> Self {
        assert_eq!(init.len(), q.dims().2);
        Self { q, init }
    }

    fn solve(&self, v: &Vector) -> Option<Vector> {
        let (nh, _, _) = self.q.dims();
        newton_argmax(self.q.as_ref(), &v.as_slice()[..nh], &v.as_slice()[nh..], &self.init).ok()
    }

    fn derivs(&self, v: &Vector, second: bool) -> Option<PolicyDerivatives> {
        let (nh, _, _) = self.q.dims();
        let rho = self.solve(v)?;
        derivatives_at(self.q.as_ref(), &v.as_slice()[..nh], &v.as_slice()[nh..], rho, second).ok()
    }
}

impl CoefficientField for ArgmaxPolicy {
    fn dim_in(&self) -> usize {
        let (h, z, _) = self.q.dims();
        h + z
    }
    fn dim_out(&self) -> usize {
        self.q.dims().2
    }
    fn eval(&self, v: &Vector, _t: f64) -> Vector {
        self.solve(v)
            .unwrap_or_else(|| Vector::from_element(self.dim_out(), f64::NAN))
    }
    fn jacobian(&self, v: &Vector, _t: f64) -> Matrix {
        match self.derivs(v, false) {
            Some(d) => d.d_v,
            None => Matrix::from_element(self.dim_out(), self.dim_in(), f64::NAN),
        }
    }
    fn hessian(&self, v: &Vector, _t: f64) -> Tensor3 {
        let n = self.dim_in();
        match self.derivs(v, true).and_then(|d| d.d_vv) {
            Some(t) => t,
            None => {
                let mut t = Tensor3::zeros(self.dim_out(), n, n);
                t.scale_mut(f64::NAN);
                t
            }
        }
    }
    fn name(&self) -> &str {
        "argmax-policy"
    }
}
