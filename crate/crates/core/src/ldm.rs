//! The four-component latent dynamics model as one stacked Itô system.
//!
//! State `x = (z, h, z~, s~)` (posterior latent, recurrent state, predicted
//! latent, reconstructed observation). Each sub-model owns one scalar
//! Brownian component, in the order encoder, sequence, predictor, decoder.
//! The encoder error enters the `z` block only.

use std::sync::Arc;

use crate::error::{check_dim, Result};
use crate::field::{CoefficientField, Field, Matrix, Tensor3, Vector, ZeroField};
use crate::grid::{BrownianBundle, TimeGrid};
use crate::sde::{PerturbedSde, SdeSystem, Trajectory};

pub const N_COMPONENTS: usize = 4;
pub const ENC: usize = 0;
pub const SEQ: usize = 1;
pub const PRED: usize = 2;
pub const DEC: usize = 3;

/// Exogenous observation path `t -> s_t`.
pub type ObsPath = Arc<dyn Fn(f64) -> Vector + Send + Sync>;

pub fn constant_obs(s: Vector) -> ObsPath {
    Arc::new(move |_| s.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Z,
    H,
    ZTilde,
    STilde,
    /// The exogenous observation; not part of the state.
    Obs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LdmDims {
    pub z: usize,
    pub h: usize,
    pub z_tilde: usize,
    pub s_tilde: usize,
    pub obs: usize,
    pub action: usize,
}

impl LdmDims {
    pub fn state(&self) -> usize {
        self.z + self.h + self.z_tilde + self.s_tilde
    }

    pub fn len(&self, b: Block) -> usize {
        match b {
            Block::Z => self.z,
            Block::H => self.h,
            Block::ZTilde => self.z_tilde,
            Block::STilde => self.s_tilde,
            Block::Obs => self.obs,
        }
    }

    /// Offset of a state block inside `x`; `None` for the observation.
    pub fn offset(&self, b: Block) -> Option<usize> {
        match b {
            Block::Z => Some(0),
            Block::H => Some(self.z),
            Block::ZTilde => Some(self.z + self.h),
            Block::STilde => Some(self.z + self.h + self.z_tilde),
            Block::Obs => None,
        }
    }

    pub fn block<'a>(&self, x: &'a Vector, b: Block) -> Vec<f64> {
        let o = self.offset(b).expect("observation is not a state block");
        x.as_slice()[o..o + self.len(b)].to_vec()
    }

    /// Stack block values into a full state.
    pub fn stack(&self, z: &[f64], h: &[f64], zt: &[f64], st: &[f64]) -> Vector {
        let mut v = Vec::with_capacity(self.state());
        v.extend_from_slice(z);
        v.extend_from_slice(h);
        v.extend_from_slice(zt);
        v.extend_from_slice(st);
        Vector::from_vec(v)
    }
}

/// A sub-model coefficient lifted to the stacked state: reads the listed
/// input blocks (and possibly the observation path), writes its output into
/// one state block, zeros elsewhere.
#[derive(Clone)]
pub struct BlockField {
    inner: Field,
    inputs: Vec<Block>,
    output: Block,
    dims: LdmDims,
    obs: Option<ObsPath>,
    /// For each inner input coordinate, the state index it reads (or None for obs).
    sources: Vec<Option<usize>>,
}

impl BlockField {
    pub fn new(
        inner: Field,
        inputs: &[Block],
        output: Block,
        dims: LdmDims,
        obs: Option<ObsPath>,
    ) -> Result<Self> {
        let mut sources = Vec::new();
        for &b in inputs {
            match dims.offset(b) {
                Some(o) => sources.extend((o..o + dims.len(b)).map(Some)),
                None => sources.extend(std::iter::repeat(None).take(dims.len(b))),
            }
        }
        check_dim(&format!("{} input", inner.name()), sources.len(), inner.dim_in())?;
        check_dim(
            &format!("{} output", inner.name()),
            dims.len(output),
            inner.dim_out(),
        )?;
        if output == Block::Obs {
            return Err(crate::Error::InvalidArgument(
                "a coefficient cannot write to the observation".into(),
            ));
        }
        if inputs.contains(&Block::Obs) && obs.is_none() {
            return Err(crate::Error::InvalidArgument(
                "field reads the observation but no observation path was given".into(),
            ));
        }
        Ok(Self {
            inner,
            inputs: inputs.to_vec(),
            output,
            dims,
            obs,
            sources,
        })
    }

    fn gather(&self, x: &Vector, t: f64) -> Vector {
        let mut u = Vec::with_capacity(self.sources.len());
        for &b in &self.inputs {
            match self.dims.offset(b) {
                Some(o) => u.extend_from_slice(&x.as_slice()[o..o + self.dims.len(b)]),
                None => {
                    let s = (self.obs.as_ref().expect("checked at construction"))(t);
                    u.extend_from_slice(s.as_slice());
                }
            }
        }
        Vector::from_vec(u)
    }
}

impl CoefficientField for BlockField {
    fn dim_in(&self) -> usize {
        self.dims.state()
    }
    fn dim_out(&self) -> usize {
        self.dims.state()
    }
    fn eval(&self, x: &Vector, t: f64) -> Vector {
        let mut out = Vector::zeros(self.dims.state());
        if self.inner.is_zero() {
            return out;
        }
        let v = self.inner.eval(&self.gather(x, t), t);
        let o = self.dims.offset(self.output).unwrap();
        out.rows_mut(o, v.len()).copy_from(&v);
        out
    }
    fn jacobian(&self, x: &Vector, t: f64) -> Matrix {
        let d = self.dims.state();
        let mut out = Matrix::zeros(d, d);
        if self.inner.is_zero() {
            return out;
        }
        let j = self.inner.jacobian(&self.gather(x, t), t);
        let o = self.dims.offset(self.output).unwrap();
        for (c, src) in self.sources.iter().enumerate() {
            if let Some(col) = src {
                for l in 0..j.nrows() {
                    out[(o + l, *col)] += j[(l, c)];
                }
            }
        }
        out
    }
    fn hessian(&self, x: &Vector, t: f64) -> Tensor3 {
        let d = self.dims.state();
        let mut out = Tensor3::zeros(d, d, d);
        if self.inner.is_zero() {
            return out;
        }
        let h = self.inner.hessian(&self.gather(x, t), t);
        let o = self.dims.offset(self.output).unwrap();
        for l in 0..self.inner.dim_out() {
            for (a, sa) in self.sources.iter().enumerate() {
                let Some(i) = sa else { continue };
                for (b, sb) in self.sources.iter().enumerate() {
                    let Some(j) = sb else { continue };
                    out.add(o + l, *i, *j, h.get(l, a, b));
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

/// `u -> f(u, pi(u))`: a coefficient over `(u, a)` closed by a policy `a = pi(u)`.
#[derive(Clone)]
pub struct PolicyClosedField {
    f: Field,
    policy: Field,
}

impl PolicyClosedField {
    pub fn new(f: Field, policy: Field) -> Result<Self> {
        check_dim(
            "closed-loop field input",
            policy.dim_in() + policy.dim_out(),
            f.dim_in(),
        )?;
        Ok(Self { f, policy })
    }

    fn lift(&self, u: &Vector, t: f64) -> Vector {
        let a = self.policy.eval(u, t);
        let mut v = Vec::with_capacity(u.len() + a.len());
        v.extend_from_slice(u.as_slice());
        v.extend_from_slice(a.as_slice());
        Vector::from_vec(v)
    }

    /// `P = [I; d pi/du]`, the derivative of `u -> (u, pi(u))`.
    fn lift_jacobian(&self, u: &Vector, t: f64) -> Matrix {
        let n = u.len();
        let na = self.policy.dim_out();
        let jp = self.policy.jacobian(u, t);
        let mut p = Matrix::zeros(n + na, n);
        p.view_mut((0, 0), (n, n)).fill_with_identity();
        p.view_mut((n, 0), (na, n)).copy_from(&jp);
        p
    }
}

impl CoefficientField for PolicyClosedField {
    fn dim_in(&self) -> usize {
        self.policy.dim_in()
    }
    fn dim_out(&self) -> usize {
        self.f.dim_out()
    }
    fn eval(&self, u: &Vector, t: f64) -> Vector {
        self.f.eval(&self.lift(u, t), t)
    }
    fn jacobian(&self, u: &Vector, t: f64) -> Matrix {
        self.f.jacobian(&self.lift(u, t), t) * self.lift_jacobian(u, t)
    }
    fn hessian(&self, u: &Vector, t: f64) -> Tensor3 {
        let v = self.lift(u, t);
        let p = self.lift_jacobian(u, t);
        let mut out = self.f.hessian(&v, t).pullback(&p, &p);
        let jf = self.f.jacobian(&v, t);
        let n = u.len();
        let na = self.policy.dim_out();
        let ja = jf.columns(n, na).into_owned();
        let hp = self.policy.hessian(u, t);
        out.add_assign(&hp.left_multiply(&ja));
        out
    }
    fn is_zero(&self) -> bool {
        self.f.is_zero()
    }
    fn name(&self) -> &str {
        self.f.name()
    }
}

/// Encoder drift/diffusion error `(sigma, sigma_bar)` over `(h, s)` and its scale.
#[derive(Clone)]
pub struct PerturbationSpec {
    pub sigma_drift: Field,
    pub sigma_diff: Field,
    pub epsilon: f64,
}

impl PerturbationSpec {
    pub fn none(dims: &LdmDims) -> Self {
        let zero = ZeroField::shared(dims.h + dims.obs, dims.z);
        Self {
            sigma_drift: zero.clone(),
            sigma_diff: zero,
            epsilon: 0.0,
        }
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }
}

/// The coupled encoder / sequence / predictor / decoder system.
///
/// Input conventions: encoder `(h, s)`, sequence `(h, z, a)` with the policy
/// over `(h, z)`, predictor `h`, decoder `(h, z~)`.
#[derive(Clone)]
pub struct LdmSystem {
    pub dims: LdmDims,
    pub enc_drift: Field,
    pub enc_diff: Field,
    pub seq_drift: Field,
    pub seq_diff: Field,
    pub pred_drift: Field,
    pub pred_diff: Field,
    pub dec_drift: Field,
    pub dec_diff: Field,
    pub policy: Field,
    pub obs: ObsPath,
}

impl LdmSystem {
    fn lift(&self, f: &Field, inputs: &[Block], out: Block) -> Result<Field> {
        Ok(Arc::new(BlockField::new(
            f.clone(),
            inputs,
            out,
            self.dims,
            Some(self.obs.clone()),
        )?))
    }

    fn seq_closed(&self, f: &Field) -> Result<Field> {
        if f.is_zero() {
            check_dim(
                "sequence input",
                self.dims.h + self.dims.z + self.dims.action,
                f.dim_in(),
            )?;
            return Ok(ZeroField::shared(self.dims.h + self.dims.z, self.dims.h));
        }
        check_dim("policy input", self.dims.h + self.dims.z, self.policy.dim_in())?;
        check_dim("policy output", self.dims.action, self.policy.dim_out())?;
        Ok(Arc::new(PolicyClosedField::new(f.clone(), self.policy.clone())?))
    }

    /// Unperturbed stacked system.
    pub fn stacked(&self) -> Result<SdeSystem> {
        use Block::*;
        let drift = crate::field::SumField::new(vec![
            self.lift(&self.enc_drift, &[H, Obs], Z)?,
            self.lift(&self.seq_closed(&self.seq_drift)?, &[H, Z], H)?,
            self.lift(&self.pred_drift, &[H], ZTilde)?,
            self.lift(&self.dec_drift, &[H, ZTilde], STilde)?,
        ]);
        let diffusions = vec![
            self.lift(&self.enc_diff, &[H, Obs], Z)?,
            self.lift(&self.seq_closed(&self.seq_diff)?, &[H, Z], H)?,
            self.lift(&self.pred_diff, &[H], ZTilde)?,
            self.lift(&self.dec_diff, &[H, ZTilde], STilde)?,
        ];
        SdeSystem::new(Arc::new(drift), diffusions)
    }

    /// Full-state system with the encoder errors embedded as `(sigma, 0, 0, 0)`.
    pub fn assemble(&self, pert: &PerturbationSpec) -> Result<PerturbedSde> {
        use Block::*;
        let base = self.stacked()?;
        let d = self.dims.state();
        let zero = ZeroField::shared(d, d);
        let drift_error = self.lift(&pert.sigma_drift, &[H, Obs], Z)?;
        let mut diffusion_errors = vec![zero; N_COMPONENTS];
        diffusion_errors[ENC] = self.lift(&pert.sigma_diff, &[H, Obs], Z)?;
        PerturbedSde::new(base, drift_error, diffusion_errors)
    }
}

pub fn integrate_ldm(
    system: &LdmSystem,
    pert: &PerturbationSpec,
    x0: &Vector,
    bundle: &BrownianBundle,
) -> Result<Trajectory> {
    check_dim("Brownian components", N_COMPONENTS, bundle.m())?;
    system.assemble(pert)?.integrate(x0, pert.epsilon, bundle)
}

/// Mean and per-coordinate variance of the encoder's latent increment
/// `z_t - z_0` along frozen inputs:
/// `mu_t = int_0^t q_enc(h_s, s_s) ds`, `var_t = int_0^t q_enc_bar(h_s, s_s)^2 ds`,
/// both by the trapezoidal rule on the grid.
pub fn conditional_gaussian_moments(
    q_enc: &dyn CoefficientField,
    q_enc_bar: &dyn CoefficientField,
    h_path: &[Vector],
    s_path: &[Vector],
    grid: &TimeGrid,
) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let np = grid.n_points();
    check_dim("h path length", np, h_path.len())?;
    check_dim("s path length", np, s_path.len())?;
    let dz = q_enc.dim_out();
    check_dim("encoder diffusion output", dz, q_enc_bar.dim_out())?;
    let input = |n: usize| -> Result<Vector> {
        let mut v = h_path[n].as_slice().to_vec();
        v.extend_from_slice(s_path[n].as_slice());
        let u = Vector::from_vec(v);
        check_dim("encoder input", q_enc.dim_in(), u.len())?;
        check_dim("encoder diffusion input", q_enc_bar.dim_in(), u.len())?;
        Ok(u)
    };
    let dt = grid.dt();
    let mut mean = vec![Vector::zeros(dz)];
    let mut var = vec![Vector::zeros(dz)];
    let mut u = input(0)?;
    let mut fm = q_enc.eval(&u, grid.time(0));
    let mut fv = q_enc_bar.eval(&u, grid.time(0)).map(|v| v * v);
    for n in 1..np {
        u = input(n)?;
        let t = grid.time(n);
        let gm = q_enc.eval(&u, t);
        let gv = q_enc_bar.eval(&u, t).map(|v| v * v);
        let m = &mean[n - 1] + (&fm + &gm) * (0.5 * dt);
        let v = &var[n - 1] + (&fv + &gv) * (0.5 * dt);
        mean.push(m);
        var.push(v);
        fm = gm;
        fv = gv;
    }
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{check_derivatives, AffineField, FnField, TanhField};

    fn dims() -> LdmDims {
        LdmDims {
            z: 1,
            h: 2,
            z_tilde: 1,
            s_tilde: 1,
            obs: 1,
            action: 1,
        }
    }

    fn tanh(rows: usize, cols: usize, seed: f64) -> Field {
        let w = Matrix::from_fn(rows, cols, |i, j| ((i * 7 + j * 3) as f64 + seed).sin());
        let b = Vector::from_fn(rows, |i, _| 0.1 * (i as f64 + seed).cos());
        TanhField::new(w, b, 0.8, Vector::zeros(rows)).shared()
    }

    pub(crate) fn small_system() -> LdmSystem {
        let d = dims();
        LdmSystem {
            dims: d,
            enc_drift: tanh(1, 3, 0.1),
            enc_diff: AffineField::constant(3, Vector::from_element(1, 0.3)).shared(),
            seq_drift: tanh(2, 4, 0.7),
            seq_diff: ZeroField::shared(4, 2),
            pred_drift: tanh(1, 2, 1.3),
            pred_diff: AffineField::constant(2, Vector::from_element(1, 0.2)).shared(),
            dec_drift: tanh(1, 3, 2.1),
            dec_diff: tanh(1, 3, 2.9),
            policy: tanh(1, 3, 3.3),
            obs: Arc::new(|t: f64| Vector::from_element(1, t.sin())),
        }
    }

    #[test]
    fn stacked_coefficients_have_consistent_derivatives() {
        let sys = small_system().stacked().unwrap();
        let x = Vector::from_vec(vec![0.2, -0.4, 0.3, 0.1, -0.6]);
        let c = check_derivatives(sys.drift.as_ref(), &x, 0.3, 1e-4);
        assert!(c.jacobian_error < 1e-7 && c.hessian_error < 1e-6, "{c:?}");
        for g in &sys.diffusions {
            let c = check_derivatives(g.as_ref(), &x, 0.3, 1e-4);
            assert!(c.jacobian_error < 1e-7 && c.hessian_error < 1e-6, "{c:?}");
        }
    }

    #[test]
    fn policy_closed_field_chain_rule() {
        let f = tanh(2, 3, 0.5);
        let pi = FnField::new(
            "pi",
            2,
            1,
            |u, _| Vector::from_element(1, (u[0] * u[1]).sin()),
            |u, _| {
                let c = (u[0] * u[1]).cos();
                Matrix::from_row_slice(1, 2, &[c * u[1], c * u[0]])
            },
            |u, _| {
                let (s, c) = (u[0] * u[1]).sin_cos();
                let mut h = Tensor3::zeros(1, 2, 2);
                h.set(0, 0, 0, -s * u[1] * u[1]);
                h.set(0, 1, 1, -s * u[0] * u[0]);
                let off = c - s * u[0] * u[1];
                h.set(0, 0, 1, off);
                h.set(0, 1, 0, off);
                h
            },
        )
        .shared();
        let closed = PolicyClosedField::new(f, pi).unwrap();
        let c = check_derivatives(&closed, &Vector::from_vec(vec![0.4, -0.9]), 0.0, 1e-4);
        assert!(c.jacobian_error < 1e-7 && c.hessian_error < 1e-6, "{c:?}");
    }

    #[test]
    fn zero_epsilon_ignores_perturbation_fields() {
        let sys = small_system();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let b = BrownianBundle::generate(g, 4, 2).unwrap();
        let x0 = Vector::from_vec(vec![0.0, 0.1, -0.1, 0.0, 0.0]);
        let none = PerturbationSpec::none(&sys.dims);
        let some = PerturbationSpec {
            sigma_drift: tanh(1, 3, 4.0),
            sigma_diff: tanh(1, 3, 5.0),
            epsilon: 0.0,
        };
        let a = integrate_ldm(&sys, &none, &x0, &b).unwrap();
        let c = integrate_ldm(&sys, &some, &x0, &b).unwrap();
        assert_eq!(a, c);
        // zero fields make epsilon irrelevant
        let d = integrate_ldm(&sys, &none.with_epsilon(0.5), &x0, &b).unwrap();
        assert_eq!(a, d);
        // a nonzero error does move the path, and only through the encoder first
        let e = integrate_ldm(&sys, &some.with_epsilon(0.5), &x0, &b).unwrap();
        assert_ne!(a.state(1)[0], e.state(1)[0]);
        assert_eq!(a.state(1)[1], e.state(1)[1]);
    }

    #[test]
    fn constant_integrands_give_exact_moments() {
        let g = TimeGrid::new(2.0, 40).unwrap();
        let c = AffineField::constant(2, Vector::from_element(1, 1.5));
        let d = AffineField::constant(2, Vector::from_element(1, 0.5));
        let h: Vec<Vector> = (0..41).map(|_| Vector::from_element(1, 0.3)).collect();
        let s = h.clone();
        let (m, v) = conditional_gaussian_moments(&c, &d, &h, &s, &g).unwrap();
        for n in 0..41 {
            let t = g.time(n);
            assert!((m[n][0] - 1.5 * t).abs() < 1e-12);
            assert!((v[n][0] - 0.25 * t).abs() < 1e-12);
        }
        let z = ZeroField::new(2, 1);
        let (_, v) = conditional_gaussian_moments(&c, &z, &h, &s, &g).unwrap();
        assert!(v.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn moments_reject_mismatched_paths() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let c = AffineField::constant(2, Vector::from_element(1, 1.0));
        let h: Vec<Vector> = (0..5).map(|_| Vector::zeros(1)).collect();
        assert!(conditional_gaussian_moments(&c, &c, &h, &h, &g).is_err());
    }
}
