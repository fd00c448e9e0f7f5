use std::sync::Arc;

use crate::field::{Matrix, Tensor3, Vector};

/// Value function over `u = (h, z, a)` with derivatives in all blocks.
pub trait QValue: Send + Sync {
    /// `(dim_h, dim_z, dim_a)`.
    fn dims(&self) -> (usize, usize, usize);
    fn eval(&self, u: &Vector) -> f64;
    fn gradient(&self, u: &Vector) -> Vector;
    fn hessian(&self, u: &Vector) -> Matrix;
    /// `T[p, q, r] = d^3 Q / du^p du^q du^r`; only needed for second-order
    /// policy derivatives.
    fn third(&self, _u: &Vector) -> Option<Tensor3> {
        None
    }

    fn dim(&self) -> usize {
        let (h, z, a) = self.dims();
        h + z + a
    }
}

pub fn stack_hza(h: &[f64], z: &[f64], a: &[f64]) -> Vector {
    let mut v = Vec::with_capacity(h.len() + z.len() + a.len());
    v.extend_from_slice(h);
    v.extend_from_slice(z);
    v.extend_from_slice(a);
    Vector::from_vec(v)
}

/// `1/2 u^T M u + b^T u + c`.
#[derive(Clone, Debug)]
pub struct QuadraticQ {
    dims: (usize, usize, usize),
    m: Matrix,
    b: Vector,
    c: f64,
}

impl QuadraticQ {
    pub fn new(dims: (usize, usize, usize), m: Matrix, b: Vector, c: f64) -> Self {
        let n = dims.0 + dims.1 + dims.2;
        assert_eq!((m.nrows(), m.ncols()), (n, n), "quadratic Q: matrix shape");
        assert_eq!(b.len(), n, "quadratic Q: linear term");
        let m = (&m + m.transpose()) * 0.5;
        Self { dims, m, b, c }
    }

    /// `Q = -scale |a - W_h h - W_z z|^2 + 1/2 v^T R v` over `v = (h, z)`,
    /// maximised at `a = W_h h + W_z z` for any `R`.
    pub fn tracking(w_h: &Matrix, w_z: &Matrix, scale: f64, state_part: Option<&Matrix>) -> Self {
        let na = w_h.nrows();
        assert_eq!(w_z.nrows(), na);
        let (nh, nz) = (w_h.ncols(), w_z.ncols());
        let n = nh + nz + na;
        // a - W v = K u with K = [-W_h, -W_z, I]
        let mut k = Matrix::zeros(na, n);
        k.view_mut((0, 0), (na, nh)).copy_from(&(-w_h));
        k.view_mut((0, nh), (na, nz)).copy_from(&(-w_z));
        k.view_mut((0, nh + nz), (na, na)).fill_with_identity();
        let mut m = k.transpose() * &k * (-2.0 * scale);
        if let Some(r) = state_part {
            let mut top = m.view_mut((0, 0), (nh + nz, nh + nz));
            top += r;
        }
        Self::new((nh, nz, na), m, Vector::zeros(n), 0.0)
    }

    pub fn shared(self) -> Arc<dyn QValue> {
        Arc::new(self)
    }
}

impl QValue for QuadraticQ {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
    fn eval(&self, u: &Vector) -> f64 {
        0.5 * u.dot(&(&self.m * u)) + self.b.dot(u) + self.c
    }
    fn gradient(&self, u: &Vector) -> Vector {
        &self.m * u + &self.b
    }
    fn hessian(&self, _u: &Vector) -> Matrix {
        self.m.clone()
    }
    fn third(&self, _u: &Vector) -> Option<Tensor3> {
        let n = self.dim();
        Some(Tensor3::zeros(n, n, n))
    }
}

type EvalFn = dyn Fn(&Vector) -> f64 + Send + Sync;
type GradFn = dyn Fn(&Vector) -> Vector + Send + Sync;
type HessFn = dyn Fn(&Vector) -> Matrix + Send + Sync;
type ThirdFn = dyn Fn(&Vector) -> Tensor3 + Send + Sync;

/// Value function from closures.
#[derive(Clone)]
pub struct FnQValue {
    dims: (usize, usize, usize),
    f: Arc<EvalFn>,
    g: Arc<GradFn>,
    h: Arc<HessFn>,
    t: Option<Arc<ThirdFn>>,
}

impl FnQValue {
    pub fn new(
        dims: (usize, usize, usize),
        f: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        g: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        h: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
    ) -> Self {
        Self {
            dims,
            f: Arc::new(f),
            g: Arc::new(g),
            h: Arc::new(h),
            t: None,
        }
    }

    pub fn with_third(mut self, t: impl Fn(&Vector) -> Tensor3 + Send + Sync + 'static) -> Self {
        self.t = Some(Arc::new(t));
        self
    }

    pub fn shared(self) -> Arc<dyn QValue> {
        Arc::new(self)
    }
}

impl QValue for FnQValue {
    fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }
    fn eval(&self, u: &Vector) -> f64 {
        (self.f)(u)
    }
    fn gradient(&self, u: &Vector) -> Vector {
        (self.g)(u)
    }
    fn hessian(&self, u: &Vector) -> Matrix {
        (self.h)(u)
    }
    fn third(&self, u: &Vector) -> Option<Tensor3> {
        self.t.as_ref().map(|t| t(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracking_q_is_maximised_on_the_target() {
        let wh = Matrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let wz = Matrix::from_row_slice(1, 1, &[2.0]);
        let q = QuadraticQ::tracking(&wh, &wz, 1.5, None);
        let h = [0.3, 0.2];
        let z = [-0.4];
        let target = 0.5 * 0.3 - 0.2 + 2.0 * -0.4;
        let u = stack_hza(&h, &z, &[target]);
        assert!(q.gradient(&u)[3].abs() < 1e-14);
        assert!(q.eval(&u).abs() < 1e-14);
        let off = stack_hza(&h, &z, &[target + 0.1]);
        assert!((q.eval(&off) + 1.5 * 0.01).abs() < 1e-14);
    }
}
