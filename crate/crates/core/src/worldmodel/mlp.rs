use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::field::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    // derivatives written in terms of the output y
    fn d1(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    fn d2(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => -2.0 * y * (1.0 - y * y),
            Activation::Identity => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Matrix,
    pub b: Vector,
    pub act: Activation,
}

/// Dense network `y_l = act_l(W_l y_{l-1} + b_l)`. Gradients are returned
/// in the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Values kept from a forward pass for backpropagation.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// `y_0 = x, y_1, ..., y_L`.
    pub ys: Vec<Vector>,
}

impl MlpCache {
    pub fn output(&self) -> &Vector {
        self.ys.last().expect("cache holds the input")
    }
}

impl Mlp {
    /// `sizes = [in, hidden.., out]`; weights `N(0, 1/fan_in)`, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let s = 1.0 / (fan_in as f64).sqrt();
                let w = Matrix::from_fn(fan_out, fan_in, |_, _| {
                    let g: f64 = StandardNormal.sample(rng);
                    g * s
                });
                let act = if l + 1 == n { output } else { hidden };
                Dense { w, b: Vector::zeros(fan_out), act }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        for pair in layers.windows(2) {
            assert_eq!(pair[0].w.nrows(), pair[1].w.ncols(), "layer sizes do not chain");
        }
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    w: Matrix::zeros(d.w.nrows(), d.w.ncols()),
                    b: Vector::zeros(d.b.len()),
                    act: d.act,
                })
                .collect(),
        }
    }

    pub fn dim_in(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn dim_out(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|d| d.w.len() + d.b.len()).sum()
    }

    /// Appends weights (column-major) then bias, layer by layer.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for d in &self.layers {
            out.extend_from_slice(d.w.as_slice());
            out.extend_from_slice(d.b.as_slice());
        }
    }

    /// Reads parameters in [`Mlp::write_params`] order; returns the count used.
    pub fn read_params(&mut self, src: &[f64]) -> usize {
        let mut k = 0;
        for d in &mut self.layers {
            let nw = d.w.len();
            d.w.as_mut_slice().copy_from_slice(&src[k..k + nw]);
            k += nw;
            let nb = d.b.len();
            d.b.as_mut_slice().copy_from_slice(&src[k..k + nb]);
            k += nb;
        }
        k
    }

    pub fn forward(&self, x: &Vector) -> Vector {
        let mut y = x.clone();
        for d in &self.layers {
            let mut pre = &d.w * &y + &d.b;
            pre.apply(|v| *v = d.act.apply(*v));
            y = pre;
        }
        y
    }

    pub fn forward_cached(&self, x: &Vector) -> MlpCache {
        let mut ys = Vec::with_capacity(self.layers.len() + 1);
        ys.push(x.clone());
        for d in &self.layers {
            let mut pre = &d.w * ys.last().unwrap() + &d.b;
            pre.apply(|v| *v = d.act.apply(*v));
            ys.push(pre);
        }
        MlpCache { ys }
    }

    /// Accumulates `dL/dtheta` into `grads` and returns `dL/dx`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &Vector, grads: &mut Mlp) -> Vector {
        let mut g = grad_out.clone();
        for (l, d) in self.layers.iter().enumerate().rev() {
            let y = &cache.ys[l + 1];
            let pre_bar = g.zip_map(y, |gi, yi| gi * d.act.d1(yi));
            grads.layers[l].w += &pre_bar * cache.ys[l].transpose();
            grads.layers[l].b += &pre_bar;
            g = d.w.transpose() * pre_bar;
        }
        g
    }

    /// Input-output Jacobian at `x`.
    pub fn jacobian(&self, x: &Vector) -> Matrix {
        let cache = self.forward_cached(x);
        let mut j = Matrix::identity(self.dim_in(), self.dim_in());
        for (l, d) in self.layers.iter().enumerate() {
            let mut m = &d.w * j;
            let y = &cache.ys[l + 1];
            for (r, mut row) in m.row_iter_mut().enumerate() {
                row *= d.act.d1(y[r]);
            }
            j = m;
        }
        j
    }

    /// `J(x) v` by forward-mode differentiation.
    pub fn jvp(&self, x: &Vector, v: &Vector) -> Vector {
        let cache = self.forward_cached(x);
        let mut t = v.clone();
        for (l, d) in self.layers.iter().enumerate() {
            let y = &cache.ys[l + 1];
            t = (&d.w * t).zip_map(y, |ti, yi| ti * d.act.d1(yi));
        }
        t
    }

    /// Returns `|J(x) v|^2` and accumulates `scale * d|J(x) v|^2 / dtheta`
    /// (with `x` and `v` held fixed) into `grads`, by reverse-mode through
    /// the primal and tangent passes.
    pub fn jvp_sq_grad(&self, x: &Vector, v: &Vector, scale: f64, grads: &mut Mlp) -> f64 {
        let cache = self.forward_cached(x);
        let n = self.layers.len();
        // tangents t_0 = v, t_l = act'(pre_l) * (W_l t_{l-1}); keep W_l t_{l-1}
        let mut ts = Vec::with_capacity(n + 1);
        let mut tpre = Vec::with_capacity(n);
        ts.push(v.clone());
        for (l, d) in self.layers.iter().enumerate() {
            let y = &cache.ys[l + 1];
            let tp = &d.w * &ts[l];
            ts.push(tp.zip_map(y, |ti, yi| ti * d.act.d1(yi)));
            tpre.push(tp);
        }
        let value = ts[n].norm_squared();
        let mut t_bar = &ts[n] * (2.0 * scale);
        let mut y_bar = Vector::zeros(self.dim_out());
        for l in (0..n).rev() {
            let d = &self.layers[l];
            let y = &cache.ys[l + 1];
            let tpre_bar = t_bar.zip_map(y, |tb, yi| tb * d.act.d1(yi));
            let mut pre_bar = y_bar.zip_map(y, |yb, yi| yb * d.act.d1(yi));
            for i in 0..pre_bar.len() {
                pre_bar[i] += d.act.d2(y[i]) * tpre[l][i] * t_bar[i];
            }
            grads.layers[l].w += &tpre_bar * ts[l].transpose() + &pre_bar * cache.ys[l].transpose();
            grads.layers[l].b += &pre_bar;
            t_bar = d.w.transpose() * tpre_bar;
            y_bar = d.w.transpose() * pre_bar;
        }
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Mlp::new(&[3, 4, 2], Activation::Tanh, Activation::Tanh, &mut rng)
    }

    fn perturbed(m: &Mlp, k: usize, h: f64) -> Mlp {
        let mut p = Vec::new();
        m.write_params(&mut p);
        p[k] += h;
        let mut out = m.clone();
        out.read_params(&p);
        out
    }

    #[test]
    fn params_round_trip() {
        let m = net();
        let mut p = Vec::new();
        m.write_params(&mut p);
        assert_eq!(p.len(), m.n_params());
        let mut z = m.zeros_like();
        assert_eq!(z.read_params(&p), p.len());
        assert_eq!(z, m);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = net();
        let x = Vector::from_vec(vec![0.3, -0.7, 0.5]);
        let w = Vector::from_vec(vec![1.3, -0.4]);
        let loss = |m: &Mlp| m.forward(&x).dot(&w);
        let mut g = m.zeros_like();
        let gx = m.backward(&m.forward_cached(&x), &w, &mut g);
        let mut flat = Vec::new();
        g.write_params(&mut flat);
        for k in 0..m.n_params() {
            let fd = (loss(&perturbed(&m, k, 1e-6)) - loss(&perturbed(&m, k, -1e-6))) / 2e-6;
            assert!((fd - flat[k]).abs() < 1e-8, "param {k}");
        }
        let j = m.jacobian(&x);
        assert!((j.transpose() * &w - gx).amax() < 1e-14);
    }

    #[test]
    fn jacobian_and_jvp_agree_with_finite_differences() {
        let m = net();
        let x = Vector::from_vec(vec![0.3, -0.7, 0.5]);
        let j = m.jacobian(&x);
        for i in 0..3 {
            let mut e = Vector::zeros(3);
            e[i] = 1e-6;
            let fd = (m.forward(&(&x + &e)) - m.forward(&(&x - &e))) / 2e-6;
            assert!((fd - j.column(i)).amax() < 1e-8);
        }
        let v = Vector::from_vec(vec![0.2, 1.0, -0.5]);
        assert!((m.jvp(&x, &v) - &j * &v).amax() < 1e-14);
    }

    #[test]
    fn double_backprop_matches_finite_differences() {
        let m = net();
        let x = Vector::from_vec(vec![0.3, -0.7, 0.5]);
        let v = Vector::from_vec(vec![0.2, 1.0, -0.5]);
        let f = |m: &Mlp| m.jvp(&x, &v).norm_squared();
        let mut g = m.zeros_like();
        let val = m.jvp_sq_grad(&x, &v, 1.0, &mut g);
        assert!((val - f(&m)).abs() < 1e-14);
        let mut flat = Vec::new();
        g.write_params(&mut flat);
        for k in 0..m.n_params() {
            let fd = (f(&perturbed(&m, k, 1e-6)) - f(&perturbed(&m, k, -1e-6))) / 2e-6;
            assert!((fd - flat[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", flat[k]);
        }
    }
}
