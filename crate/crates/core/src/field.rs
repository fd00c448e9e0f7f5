//! Coefficient fields: vector-valued maps `x, t -> R^n` carrying exact first
//! and second derivatives.
//!
//! Every drift, diffusion and perturbation coefficient in the crate is a
//! [`CoefficientField`]. The sensitivity equations need the Jacobian and the
//! Hessian along the unperturbed path, so fields provide them analytically;
//! [`check_derivatives`] compares both against central finite differences.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Dense rank-3 tensor indexed `(l, i, j)`.
///
/// For a field `f: R^n -> R^m` the Hessian is stored with
/// `T[l, i, j] = d^2 f^l / dx^i dx^j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(d0: usize, d1: usize, d2: usize) -> Self {
        Self {
            dims: (d0, d1, d2),
            data: vec![0.0; d0 * d1 * d2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    fn offset(&self, l: usize, i: usize, j: usize) -> usize {
        debug_assert!(l < self.dims.0 && i < self.dims.1 && j < self.dims.2);
        (l * self.dims.1 + i) * self.dims.2 + j
    }

    #[inline]
    pub fn get(&self, l: usize, i: usize, j: usize) -> f64 {
        self.data[self.offset(l, i, j)]
    }

    #[inline]
    pub fn set(&mut self, l: usize, i: usize, j: usize, v: f64) {
        let o = self.offset(l, i, j);
        self.data[o] = v;
    }

    #[inline]
    pub fn add(&mut self, l: usize, i: usize, j: usize, v: f64) {
        let o = self.offset(l, i, j);
        self.data[o] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Matrix `T[l, :, :]`.
    pub fn slice(&self, l: usize) -> Matrix {
        Matrix::from_fn(self.dims.1, self.dims.2, |i, j| self.get(l, i, j))
    }

    pub fn set_slice(&mut self, l: usize, m: &Matrix) {
        for i in 0..self.dims.1 {
            for j in 0..self.dims.2 {
                self.set(l, i, j, m[(i, j)]);
            }
        }
    }

    /// Bilinear contraction `v_l = sum_ij T[l,i,j] u_i w_j`.
    pub fn bilinear(&self, u: &Vector, w: &Vector) -> Vector {
        let (d0, d1, d2) = self.dims;
        debug_assert_eq!(u.len(), d1);
        debug_assert_eq!(w.len(), d2);
        let mut out = Vector::zeros(d0);
        for l in 0..d0 {
            let mut acc = 0.0;
            for i in 0..d1 {
                let ui = u[i];
                if ui == 0.0 {
                    continue;
                }
                let row = &self.data[(l * d1 + i) * d2..(l * d1 + i + 1) * d2];
                let mut inner = 0.0;
                for j in 0..d2 {
                    inner += row[j] * w[j];
                }
                acc += ui * inner;
            }
            out[l] = acc;
        }
        out
    }

    /// Contraction over the last index: `M[l, i] = sum_j T[l,i,j] w_j`.
    pub fn contract_last(&self, w: &Vector) -> Matrix {
        let (d0, d1, d2) = self.dims;
        Matrix::from_fn(d0, d1, |l, i| {
            let row = &self.data[(l * d1 + i) * d2..(l * d1 + i + 1) * d2];
            row.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
        })
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }

    pub fn scale_mut(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        assert_eq!(self.dims, other.dims);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    /// `out[l, p, q] = sum_ij T[l,i,j] A[i,p] B[j,q]` (bilinear change of variables).
    pub fn pullback(&self, a: &Matrix, b: &Matrix) -> Tensor3 {
        let (d0, d1, d2) = self.dims;
        assert_eq!(a.nrows(), d1);
        assert_eq!(b.nrows(), d2);
        let mut out = Tensor3::zeros(d0, a.ncols(), b.ncols());
        for l in 0..d0 {
            let s = self.slice(l);
            let m = a.transpose() * s * b;
            out.set_slice(l, &m);
        }
        out
    }

    /// `out[c, i, j] = sum_l M[c, l] T[l, i, j]` (contraction on the leading index).
    pub fn left_multiply(&self, m: &Matrix) -> Tensor3 {
        let (d0, d1, d2) = self.dims;
        assert_eq!(m.ncols(), d0);
        let mut out = Tensor3::zeros(m.nrows(), d1, d2);
        for c in 0..m.nrows() {
            for l in 0..d0 {
                let w = m[(c, l)];
                if w == 0.0 {
                    continue;
                }
                for i in 0..d1 {
                    for j in 0..d2 {
                        out.add(c, i, j, w * self.get(l, i, j));
                    }
                }
            }
        }
        out
    }
}

/// A drift or diffusion coefficient with exact Jacobian and Hessian.
pub trait CoefficientField: Send + Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn eval(&self, x: &Vector, t: f64) -> Vector;
    /// `[dim_out x dim_in]`.
    fn jacobian(&self, x: &Vector, t: f64) -> Matrix;
    /// `[dim_out x dim_in x dim_in]`.
    fn hessian(&self, x: &Vector, t: f64) -> Tensor3;

    /// True when the field is identically zero; integrators skip such terms.
    fn is_zero(&self) -> bool {
        false
    }

    fn name(&self) -> &str {
        "field"
    }
}

pub type Field = Arc<dyn CoefficientField>;

impl fmt::Debug for dyn CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{} -> {}]", self.name(), self.dim_in(), self.dim_out())
    }
}

#[derive(Clone, Debug)]
pub struct ZeroField {
    dim_in: usize,
    dim_out: usize,
}

impl ZeroField {
    pub fn new(dim_in: usize, dim_out: usize) -> Self {
        Self { dim_in, dim_out }
    }

    pub fn shared(dim_in: usize, dim_out: usize) -> Field {
        Arc::new(Self::new(dim_in, dim_out))
    }
}

impl CoefficientField for ZeroField {
    fn dim_in(&self) -> usize {
        self.dim_in
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn eval(&self, _x: &Vector, _t: f64) -> Vector {
        Vector::zeros(self.dim_out)
    }
    fn jacobian(&self, _x: &Vector, _t: f64) -> Matrix {
        Matrix::zeros(self.dim_out, self.dim_in)
    }
    fn hessian(&self, _x: &Vector, _t: f64) -> Tensor3 {
        Tensor3::zeros(self.dim_out, self.dim_in, self.dim_in)
    }
    fn is_zero(&self) -> bool {
        true
    }
    fn name(&self) -> &str {
        "zero"
    }
}

/// Affine field `x -> A x + b`. A constant field is the special case `A = 0`.
#[derive(Clone, Debug)]
pub struct AffineField {
    a: Matrix,
    b: Vector,
}

impl AffineField {
    pub fn new(a: Matrix, b: Vector) -> Self {
        assert_eq!(a.nrows(), b.len(), "affine field: A rows must match b");
        Self { a, b }
    }

    pub fn linear(a: Matrix) -> Self {
        let n = a.nrows();
        Self::new(a, Vector::zeros(n))
    }

    pub fn constant(dim_in: usize, value: Vector) -> Self {
        Self::new(Matrix::zeros(value.len(), dim_in), value)
    }

    pub fn shared(self) -> Field {
        Arc::new(self)
    }
}

impl CoefficientField for AffineField {
    fn dim_in(&self) -> usize {
        self.a.ncols()
    }
    fn dim_out(&self) -> usize {
        self.a.nrows()
    }
    fn eval(&self, x: &Vector, _t: f64) -> Vector {
        &self.a * x + &self.b
    }
    fn jacobian(&self, _x: &Vector, _t: f64) -> Matrix {
        self.a.clone()
    }
    fn hessian(&self, _x: &Vector, _t: f64) -> Tensor3 {
        Tensor3::zeros(self.dim_out(), self.dim_in(), self.dim_in())
    }
    fn is_zero(&self) -> bool {
        self.a.iter().all(|v| *v == 0.0) && self.b.iter().all(|v| *v == 0.0)
    }
    fn name(&self) -> &str {
        "affine"
    }
}

/// Bounded smooth layer `x -> scale * tanh(W x + b) + offset`.
#[derive(Clone, Debug)]
pub struct TanhField {
    w: Matrix,
    b: Vector,
    scale: f64,
    offset: Vector,
}

impl TanhField {
    pub fn new(w: Matrix, b: Vector, scale: f64, offset: Vector) -> Self {
        assert_eq!(w.nrows(), b.len());
        assert_eq!(w.nrows(), offset.len());
        Self { w, b, scale, offset }
    }

    pub fn shared(self) -> Field {
        Arc::new(self)
    }

    fn activations(&self, x: &Vector) -> Vector {
        (&self.w * x + &self.b).map(f64::tanh)
    }
}

impl CoefficientField for TanhField {
    fn dim_in(&self) -> usize {
        self.w.ncols()
    }
    fn dim_out(&self) -> usize {
        self.w.nrows()
    }
    fn eval(&self, x: &Vector, _t: f64) -> Vector {
        self.activations(x) * self.scale + &self.offset
    }
    fn jacobian(&self, x: &Vector, _t: f64) -> Matrix {
        let y = self.activations(x);
        let mut j = self.w.clone();
        for (l, mut row) in j.row_iter_mut().enumerate() {
            row *= self.scale * (1.0 - y[l] * y[l]);
        }
        j
    }
    fn hessian(&self, x: &Vector, _t: f64) -> Tensor3 {
        let y = self.activations(x);
        let (m, n) = (self.dim_out(), self.dim_in());
        let mut h = Tensor3::zeros(m, n, n);
        for l in 0..m {
            let c = self.scale * (-2.0 * y[l] * (1.0 - y[l] * y[l]));
            for i in 0..n {
                for j in 0..n {
                    h.set(l, i, j, c * self.w[(l, i)] * self.w[(l, j)]);
                }
            }
        }
        h
    }
    fn name(&self) -> &str {
        "tanh"
    }
}

type EvalFn = dyn Fn(&Vector, f64) -> Vector + Send + Sync;
type JacFn = dyn Fn(&Vector, f64) -> Matrix + Send + Sync;
type HessFn = dyn Fn(&Vector, f64) -> Tensor3 + Send + Sync;

/// Field assembled from closures. The caller is responsible for the
/// derivatives being consistent; [`check_derivatives`] verifies them.
#[derive(Clone)]
pub struct FnField {
    name: String,
    dim_in: usize,
    dim_out: usize,
    eval: Arc<EvalFn>,
    jac: Arc<JacFn>,
    hess: Arc<HessFn>,
}

impl FnField {
    pub fn new(
        name: impl Into<String>,
        dim_in: usize,
        dim_out: usize,
        eval: impl Fn(&Vector, f64) -> Vector + Send + Sync + 'static,
        jac: impl Fn(&Vector, f64) -> Matrix + Send + Sync + 'static,
        hess: impl Fn(&Vector, f64) -> Tensor3 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim_in,
            dim_out,
            eval: Arc::new(eval),
            jac: Arc::new(jac),
            hess: Arc::new(hess),
        }
    }

    /// Scalar-to-scalar field from `f`, `f'`, `f''`.
    pub fn scalar(
        name: impl Into<String>,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        d2f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(
            name,
            1,
            1,
            move |x, t| Vector::from_element(1, f(x[0], t)),
            move |x, t| Matrix::from_element(1, 1, df(x[0], t)),
            move |x, t| {
                let mut h = Tensor3::zeros(1, 1, 1);
                h.set(0, 0, 0, d2f(x[0], t));
                h
            },
        )
    }

    pub fn shared(self) -> Field {
        Arc::new(self)
    }
}

impl CoefficientField for FnField {
    fn dim_in(&self) -> usize {
        self.dim_in
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn eval(&self, x: &Vector, t: f64) -> Vector {
        (self.eval)(x, t)
    }
    fn jacobian(&self, x: &Vector, t: f64) -> Matrix {
        (self.jac)(x, t)
    }
    fn hessian(&self, x: &Vector, t: f64) -> Tensor3 {
        (self.hess)(x, t)
    }
    fn name(&self) -> &str {
        &self.name
    }
}

/// Pointwise sum of fields with identical dimensions.
#[derive(Clone)]
pub struct SumField {
    parts: Vec<Field>,
    dim_in: usize,
    dim_out: usize,
}

impl SumField {
    pub fn new(parts: Vec<Field>) -> Self {
        assert!(!parts.is_empty(), "sum of zero fields");
        let dim_in = parts[0].dim_in();
        let dim_out = parts[0].dim_out();
        for p in &parts {
            assert_eq!(p.dim_in(), dim_in, "sum field: dim_in mismatch");
            assert_eq!(p.dim_out(), dim_out, "sum field: dim_out mismatch");
        }
        let parts: Vec<Field> = parts.into_iter().filter(|p| !p.is_zero()).collect();
        Self {
            parts,
            dim_in,
            dim_out,
        }
    }
}

impl CoefficientField for SumField {
    fn dim_in(&self) -> usize {
        self.dim_in
    }
    fn dim_out(&self) -> usize {
        self.dim_out
    }
    fn eval(&self, x: &Vector, t: f64) -> Vector {
        let mut out = Vector::zeros(self.dim_out);
        for p in &self.parts {
            out += p.eval(x, t);
        }
        out
    }
    fn jacobian(&self, x: &Vector, t: f64) -> Matrix {
        let mut out = Matrix::zeros(self.dim_out, self.dim_in);
        for p in &self.parts {
            out += p.jacobian(x, t);
        }
        out
    }
    fn hessian(&self, x: &Vector, t: f64) -> Tensor3 {
        let mut out = Tensor3::zeros(self.dim_out, self.dim_in, self.dim_in);
        for p in &self.parts {
            out.add_assign(&p.hessian(x, t));
        }
        out
    }
    fn is_zero(&self) -> bool {
        self.parts.is_empty()
    }
    fn name(&self) -> &str {
        "sum"
    }
}

/// Reads the coordinates `inputs` of an `R^dim` state, applies `inner` and
/// writes the result at `offset` of an `R^dim` output.
#[derive(Clone)]
pub struct SubspaceField {
    inner: Field,
    inputs: Vec<usize>,
    offset: usize,
    dim: usize,
}

impl SubspaceField {
    pub fn new(inner: Field, inputs: Vec<usize>, offset: usize, dim: usize) -> Self {
        assert_eq!(inner.dim_in(), inputs.len(), "subspace field: input count");
        assert!(inputs.iter().all(|&i| i < dim), "subspace field: input index");
        assert!(offset + inner.dim_out() <= dim, "subspace field: output range");
        Self {
            inner,
            inputs,
            offset,
            dim,
        }
    }

    pub fn shared(self) -> Field {
        Arc::new(self)
    }

    fn gather(&self, x: &Vector) -> Vector {
        Vector::from_iterator(self.inputs.len(), self.inputs.iter().map(|&i| x[i]))
    }
}

impl CoefficientField for SubspaceField {
    fn dim_in(&self) -> usize {
        self.dim
    }
    fn dim_out(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &Vector, t: f64) -> Vector {
        let mut out = Vector::zeros(self.dim);
        if !self.inner.is_zero() {
            let v = self.inner.eval(&self.gather(x), t);
            out.rows_mut(self.offset, v.len()).copy_from(&v);
        }
        out
    }
    fn jacobian(&self, x: &Vector, t: f64) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        if !self.inner.is_zero() {
            let j = self.inner.jacobian(&self.gather(x), t);
            for (c, &col) in self.inputs.iter().enumerate() {
                for l in 0..j.nrows() {
                    out[(self.offset + l, col)] += j[(l, c)];
                }
            }
        }
        out
    }
    fn hessian(&self, x: &Vector, t: f64) -> Tensor3 {
        let mut out = Tensor3::zeros(self.dim, self.dim, self.dim);
        if !self.inner.is_zero() {
            let h = self.inner.hessian(&self.gather(x), t);
            for l in 0..self.inner.dim_out() {
                for (a, &i) in self.inputs.iter().enumerate() {
                    for (b, &j) in self.inputs.iter().enumerate() {
                        out.add(self.offset + l, i, j, h.get(l, a, b));
                    }
                }
            }
        }
        out
    }
    fn is_zero(&self) -> bool {
        self.inner.is_zero()
    }
    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Maximum absolute deviation of the analytic derivatives from central
/// finite differences at one point.
#[derive(Clone, Copy, Debug)]
pub struct DerivativeCheck {
    pub jacobian_error: f64,
    pub hessian_error: f64,
}

/// Central finite-difference check of `jacobian` (against `eval`) and
/// `hessian` (against `jacobian`). Both errors are `O(step^2)`.
pub fn check_derivatives(
    field: &dyn CoefficientField,
    x: &Vector,
    t: f64,
    step: f64,
) -> DerivativeCheck {
    let n = field.dim_in();
    let m = field.dim_out();
    let jac = field.jacobian(x, t);
    let hess = field.hessian(x, t);
    let mut jac_err: f64 = 0.0;
    let mut hess_err: f64 = 0.0;
    for i in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[i] += step;
        xm[i] -= step;
        let df = (field.eval(&xp, t) - field.eval(&xm, t)) / (2.0 * step);
        let dj = (field.jacobian(&xp, t) - field.jacobian(&xm, t)) / (2.0 * step);
        for l in 0..m {
            jac_err = jac_err.max((df[l] - jac[(l, i)]).abs());
            for j in 0..n {
                // dj[(l, j)] approximates d^2 f^l / dx^j dx^i
                hess_err = hess_err.max((dj[(l, j)] - hess.get(l, j, i)).abs());
            }
        }
    }
    DerivativeCheck {
        jacobian_error: jac_err,
        hessian_error: hess_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nonlinear_2d() -> FnField {
        // f(x) = (sin(x0) x1, x0^2 + cos(x1) t)
        FnField::new(
            "test2d",
            2,
            2,
            |x, t| Vector::from_vec(vec![x[0].sin() * x[1], x[0] * x[0] + x[1].cos() * t]),
            |x, t| {
                Matrix::from_row_slice(
                    2,
                    2,
                    &[x[0].cos() * x[1], x[0].sin(), 2.0 * x[0], -x[1].sin() * t],
                )
            },
            |x, t| {
                let mut h = Tensor3::zeros(2, 2, 2);
                h.set(0, 0, 0, -x[0].sin() * x[1]);
                h.set(0, 0, 1, x[0].cos());
                h.set(0, 1, 0, x[0].cos());
                h.set(1, 0, 0, 2.0);
                h.set(1, 1, 1, -x[1].cos() * t);
                h
            },
        )
    }

    #[test]
    fn tanh_field_derivatives_match_finite_differences() {
        let w = Matrix::from_row_slice(2, 3, &[0.3, -0.7, 1.1, 0.5, 0.2, -0.4]);
        let f = TanhField::new(w, Vector::from_vec(vec![0.1, -0.2]), 1.5, Vector::zeros(2));
        let x = Vector::from_vec(vec![0.4, -0.3, 0.9]);
        let c = check_derivatives(&f, &x, 0.0, 1e-4);
        assert!(c.jacobian_error < 1e-7, "{c:?}");
        assert!(c.hessian_error < 1e-7, "{c:?}");
    }

    #[test]
    fn fn_field_check_detects_wrong_hessian() {
        let good = nonlinear_2d();
        let x = Vector::from_vec(vec![0.7, -1.2]);
        let c = check_derivatives(&good, &x, 0.5, 1e-4);
        assert!(c.jacobian_error < 1e-7 && c.hessian_error < 1e-7, "{c:?}");

        let bad = FnField::scalar("bad", |x, _| x * x * x, |x, _| 3.0 * x * x, |_, _| 0.0);
        let c = check_derivatives(&bad, &Vector::from_element(1, 1.0), 0.0, 1e-4);
        assert!(c.hessian_error > 1.0);
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let f = nonlinear_2d();
        let x = Vector::from_vec(vec![0.7, -1.2]);
        let e1 = check_derivatives(&f, &x, 0.5, 1e-2).jacobian_error;
        let e2 = check_derivatives(&f, &x, 0.5, 5e-3).jacobian_error;
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sum_field_drops_zero_parts() {
        let a = AffineField::linear(Matrix::identity(2, 2)).shared();
        let z = ZeroField::shared(2, 2);
        let s = SumField::new(vec![a, z.clone()]);
        assert!(!s.is_zero());
        assert!(SumField::new(vec![z]).is_zero());
        let x = Vector::from_vec(vec![1.0, 2.0]);
        assert_eq!(s.eval(&x, 0.0), x);
    }

    #[test]
    fn tensor_pullback_and_bilinear_agree() {
        let mut t = Tensor3::zeros(1, 2, 2);
        t.set(0, 0, 0, 1.0);
        t.set(0, 0, 1, 2.0);
        t.set(0, 1, 0, 2.0);
        t.set(0, 1, 1, -1.0);
        let a = Matrix::from_row_slice(2, 1, &[1.0, 3.0]);
        let p = t.pullback(&a, &a);
        let u = Vector::from_vec(vec![1.0, 3.0]);
        assert_eq!(p.get(0, 0, 0), t.bilinear(&u, &u)[0]);
    }
}
