use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{Matrix, Vector};

use super::mlp::{Activation, Mlp, MlpCache};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 4.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub obs: usize,
    pub action: usize,
    pub z: usize,
    pub h: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn sequence_input(&self) -> usize {
        self.h + self.z + self.action
    }
}

/// Discrete-time latent dynamics model. Encoder `(h, s) -> (mean, logvar)`
/// of `z`, sequence cell `(h, z, a) -> h'`, predictor `h -> (mean, logvar)`
/// of `z~`, decoder `(h, z) -> s`.
#[derive(Clone, Debug, PartialEq)]
pub struct LdmModel {
    pub dims: ModelDims,
    pub encoder: Mlp,
    pub sequence: Mlp,
    pub predictor: Mlp,
    pub decoder: Mlp,
}

/// One training sequence: `T + 1` observations and `T` actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub obs: Vec<Vector>,
    pub actions: Vec<Vector>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Per-step noise for the reparameterised encoder sample
/// `z = mean + exp(logvar / 2) xi + offset`; `offset` carries injected
/// encoder errors and is not differentiated.
#[derive(Clone, Debug)]
pub struct EncodeNoise {
    pub xi: Vec<Vector>,
    pub offset: Vec<Vector>,
}

impl EncodeNoise {
    pub fn zeros(steps: usize, z: usize) -> Self {
        Self {
            xi: vec![Vector::zeros(z); steps],
            offset: vec![Vector::zeros(z); steps],
        }
    }
}

fn split_gaussian(out: &Vector, n: usize) -> (Vector, Vector, Vec<bool>) {
    let mean = out.rows(0, n).into_owned();
    let raw = out.rows(n, n);
    let active: Vec<bool> = raw.iter().map(|v| (LOGVAR_MIN..=LOGVAR_MAX).contains(v)).collect();
    let lv = raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
    (mean, lv, active)
}

fn cat(parts: &[&[f64]]) -> Vector {
    Vector::from_vec(parts.iter().flat_map(|p| p.iter().copied()).collect())
}

/// `dL/dtheta` laid out like [`LdmModel::params`].
#[derive(Clone, Debug)]
pub struct ModelGrad {
    pub encoder: Mlp,
    pub sequence: Mlp,
    pub predictor: Mlp,
    pub decoder: Mlp,
}

impl ModelGrad {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.encoder.write_params(&mut v);
        self.sequence.write_params(&mut v);
        self.predictor.write_params(&mut v);
        self.decoder.write_params(&mut v);
        v
    }
}

struct StepCache {
    z: Vector,
    enc: MlpCache,
    enc_lv: Vector,
    enc_active: Vec<bool>,
    xi: Vector,
    pred: MlpCache,
    pred_mean: Vector,
    pred_lv: Vector,
    pred_active: Vec<bool>,
    dec: MlpCache,
    prior_dec: Option<MlpCache>,
    target: Vector,
    seq: Option<MlpCache>,
}

/// Weights of the optional loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Squared error of the observation decoded from `(h, predictor mean)`.
    pub prior_recon: f64,
    /// `log q(z | h, s)` of the encoder sample; with it the latent term is a
    /// one-sample KL estimate and the encoder variance cannot collapse.
    pub posterior_entropy: f64,
}

impl LossWeights {
    /// NLL of `z` under the predictor plus posterior reconstruction only.
    pub const PLAIN: LossWeights = LossWeights { prior_recon: 0.0, posterior_entropy: 0.0 };
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { prior_recon: 1.0, posterior_entropy: 1.0 }
    }
}

/// Result of [`LdmModel::loss_and_grad`].
#[derive(Clone, Debug)]
pub struct LossEval {
    /// Mean over steps and sequences of the Gaussian NLL of `z` under the
    /// predictor plus the squared reconstruction error.
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Sequence-cell inputs `(h, z, a)` visited by the batch.
    pub cell_inputs: Vec<Vector>,
    /// Encoder inputs `(h, s)` visited by the batch.
    pub encoder_inputs: Vec<Vector>,
}

impl LdmModel {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (hid, t, id) = (dims.hidden, Activation::Tanh, Activation::Identity);
        let encoder = Mlp::new(&[dims.h + dims.obs, hid, 2 * dims.z], t, id, &mut rng);
        let sequence = Mlp::new(&[dims.sequence_input(), hid, dims.h], t, t, &mut rng);
        let predictor = Mlp::new(&[dims.h, hid, 2 * dims.z], t, id, &mut rng);
        let decoder = Mlp::new(&[dims.h + dims.z, hid, dims.obs], t, id, &mut rng);
        Self { dims, encoder, sequence, predictor, decoder }
    }

    /// Assemble from networks, checking their shapes against `dims`.
    pub fn from_parts(dims: ModelDims, encoder: Mlp, sequence: Mlp, predictor: Mlp, decoder: Mlp) -> Result<Self> {
        check_dim("encoder input", dims.h + dims.obs, encoder.dim_in())?;
        check_dim("encoder output", 2 * dims.z, encoder.dim_out())?;
        check_dim("sequence input", dims.sequence_input(), sequence.dim_in())?;
        check_dim("sequence output", dims.h, sequence.dim_out())?;
        check_dim("predictor input", dims.h, predictor.dim_in())?;
        check_dim("predictor output", 2 * dims.z, predictor.dim_out())?;
        check_dim("decoder input", dims.h + dims.z, decoder.dim_in())?;
        check_dim("decoder output", dims.obs, decoder.dim_out())?;
        Ok(Self { dims, encoder, sequence, predictor, decoder })
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.sequence.n_params() + self.predictor.n_params() + self.decoder.n_params()
    }

    /// Offset and length of the sequence cell inside [`LdmModel::params`].
    pub fn sequence_range(&self) -> std::ops::Range<usize> {
        let a = self.encoder.n_params();
        a..a + self.sequence.n_params()
    }

    pub fn encoder_range(&self) -> std::ops::Range<usize> {
        0..self.encoder.n_params()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        self.encoder.write_params(&mut v);
        self.sequence.write_params(&mut v);
        self.predictor.write_params(&mut v);
        self.decoder.write_params(&mut v);
        v
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.n_params(), p.len())?;
        let mut k = self.encoder.read_params(p);
        k += self.sequence.read_params(&p[k..]);
        k += self.predictor.read_params(&p[k..]);
        self.decoder.read_params(&p[k..]);
        Ok(())
    }

    pub fn zero_grad(&self) -> ModelGrad {
        ModelGrad {
            encoder: self.encoder.zeros_like(),
            sequence: self.sequence.zeros_like(),
            predictor: self.predictor.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// `(mean, clamped logvar)` of `z`.
    pub fn encode(&self, h: &Vector, s: &Vector) -> (Vector, Vector) {
        let out = self.encoder.forward(&cat(&[h.as_slice(), s.as_slice()]));
        let (m, lv, _) = split_gaussian(&out, self.dims.z);
        (m, lv)
    }

    pub fn step(&self, h: &Vector, z: &Vector, a: &Vector) -> Vector {
        self.sequence.forward(&cat(&[h.as_slice(), z.as_slice(), a.as_slice()]))
    }

    /// `(mean, clamped logvar)` of `z~`.
    pub fn predict(&self, h: &Vector) -> (Vector, Vector) {
        let out = self.predictor.forward(h);
        let (m, lv, _) = split_gaussian(&out, self.dims.z);
        (m, lv)
    }

    pub fn decode(&self, h: &Vector, z: &Vector) -> Vector {
        self.decoder.forward(&cat(&[h.as_slice(), z.as_slice()]))
    }

    /// Jacobian of the sequence cell with respect to `(h, z, a)`.
    pub fn sequence_jacobian(&self, input: &Vector) -> Matrix {
        self.sequence.jacobian(input)
    }

    /// `sqrt(mean_u |J(u)|_F^2)` by full enumeration of the Jacobian.
    pub fn exact_sequence_jacobian_norm(&self, inputs: &[Vector]) -> f64 {
        if inputs.is_empty() {
            return 0.0;
        }
        let s: f64 = inputs.iter().map(|u| self.sequence.jacobian(u).norm_squared()).sum();
        (s / inputs.len() as f64).sqrt()
    }

    /// Reparameterisation noise for a sequence from `seed`.
    pub fn sample_noise(&self, steps: usize, seed: u64) -> EncodeNoise {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = (0..steps)
            .map(|_| Vector::from_fn(self.dims.z, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        EncodeNoise { xi, offset: vec![Vector::zeros(self.dims.z); steps] }
    }

    fn check_sequence(&self, seq: &Sequence, noise: &EncodeNoise) -> Result<()> {
        if seq.obs.len() != seq.actions.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "a sequence needs one more observation than actions, got {} and {}",
                seq.obs.len(),
                seq.actions.len()
            )));
        }
        if noise.xi.len() < seq.obs.len() || noise.offset.len() < seq.obs.len() {
            return Err(Error::InvalidArgument("encoder noise shorter than the sequence".into()));
        }
        for s in &seq.obs {
            check_dim("observation", self.dims.obs, s.len())?;
        }
        for a in &seq.actions {
            check_dim("action", self.dims.action, a.len())?;
        }
        Ok(())
    }

    /// Dynamics loss over a batch and its exact gradient by backpropagation
    /// through time. `h_0 = 0` for every sequence. Per step the loss is the
    /// Gaussian NLL of `z` under the predictor, the squared reconstruction
    /// error from `(h, z)`, and the weighted terms of [`LossWeights`].
    pub fn loss_and_grad(&self, batch: &[Sequence], noise: &[EncodeNoise], w: LossWeights) -> Result<LossEval> {
        let prior_weight = w.prior_recon;
        if batch.is_empty() || batch.len() != noise.len() {
            return Err(Error::InvalidArgument("batch and noise must be non-empty and of equal length".into()));
        }
        let nz = self.dims.z;
        let nh = self.dims.h;
        let mut grads = self.zero_grad();
        let mut total = 0.0;
        let mut cell_inputs = Vec::new();
        let mut encoder_inputs = Vec::new();
        for (seq, nse) in batch.iter().zip(noise) {
            self.check_sequence(seq, nse)?;
            let steps = seq.obs.len();
            let weight = 1.0 / (steps as f64 * batch.len() as f64);
            let mut h = Vector::zeros(nh);
            let mut caches: Vec<StepCache> = Vec::with_capacity(steps);
            for t in 0..steps {
                let s = &seq.obs[t];
                let eu = cat(&[h.as_slice(), s.as_slice()]);
                let enc = self.encoder.forward_cached(&eu);
                encoder_inputs.push(eu);
                let (em, elv, eact) = split_gaussian(enc.output(), nz);
                let sd = elv.map(|v| (0.5 * v).exp());
                let z = &em + sd.component_mul(&nse.xi[t]) + &nse.offset[t];
                let pred = self.predictor.forward_cached(&h);
                let (pm, plv, pact) = split_gaussian(pred.output(), nz);
                let dec = self.decoder.forward_cached(&cat(&[h.as_slice(), z.as_slice()]));
                let r = dec.output() - s;
                let prior_dec = (prior_weight != 0.0).then(|| {
                    let c = self.decoder.forward_cached(&cat(&[h.as_slice(), pm.as_slice()]));
                    total += weight * prior_weight * (c.output() - s).norm_squared();
                    c
                });
                let mut nll = 0.0;
                for i in 0..nz {
                    let d = z[i] - pm[i];
                    nll += 0.5 * (d * d * (-plv[i]).exp() + plv[i] + LN_2PI);
                }
                total += weight * (nll + r.norm_squared());
                if w.posterior_entropy != 0.0 {
                    let log_q: f64 = (0..nz)
                        .map(|i| -0.5 * (elv[i] + nse.xi[t][i] * nse.xi[t][i] + LN_2PI))
                        .sum();
                    total += weight * w.posterior_entropy * log_q;
                }
                let seq_cache = if t + 1 < steps {
                    let u = cat(&[h.as_slice(), z.as_slice(), seq.actions[t].as_slice()]);
                    let c = self.sequence.forward_cached(&u);
                    cell_inputs.push(u);
                    Some(c)
                } else {
                    None
                };
                let next = seq_cache.as_ref().map(|c| c.output().clone());
                caches.push(StepCache {
                    z,
                    enc,
                    enc_lv: elv,
                    enc_active: eact,
                    xi: nse.xi[t].clone(),
                    pred,
                    pred_mean: pm,
                    pred_lv: plv,
                    pred_active: pact,
                    dec,
                    prior_dec,
                    target: s.clone(),
                    seq: seq_cache,
                });
                if let Some(n) = next {
                    h = n;
                }
            }
            // reverse sweep; h_bar_next is dL/dh_{t+1}
            let mut h_bar_next = Vector::zeros(nh);
            for c in caches.iter().rev() {
                let mut h_bar = Vector::zeros(nh);
                let mut z_bar = Vector::zeros(nz);
                if let Some(sc) = &c.seq {
                    let g = self.sequence.backward(sc, &h_bar_next, &mut grads.sequence);
                    h_bar += g.rows(0, nh);
                    z_bar += g.rows(nh, nz);
                }
                let r_bar = (c.dec.output() - &c.target) * (2.0 * weight);
                let g = self.decoder.backward(&c.dec, &r_bar, &mut grads.decoder);
                h_bar += g.rows(0, nh);
                z_bar += g.rows(nh, nz);
                let mut p_bar = Vector::zeros(2 * nz);
                if let Some(pd) = &c.prior_dec {
                    let r_bar = (pd.output() - &c.target) * (2.0 * weight * prior_weight);
                    let g = self.decoder.backward(pd, &r_bar, &mut grads.decoder);
                    h_bar += g.rows(0, nh);
                    p_bar.rows_mut(0, nz).copy_from(&g.rows(nh, nz));
                }
                for i in 0..nz {
                    let inv = (-c.pred_lv[i]).exp();
                    let d = c.z[i] - c.pred_mean[i];
                    z_bar[i] += weight * d * inv;
                    p_bar[i] -= weight * d * inv;
                    if c.pred_active[i] {
                        p_bar[nz + i] = weight * 0.5 * (1.0 - d * d * inv);
                    }
                }
                h_bar += self.predictor.backward(&c.pred, &p_bar, &mut grads.predictor);
                let mut e_bar = Vector::zeros(2 * nz);
                for i in 0..nz {
                    e_bar[i] = z_bar[i];
                    if c.enc_active[i] {
                        e_bar[nz + i] = z_bar[i] * 0.5 * (0.5 * c.enc_lv[i]).exp() * c.xi[i]
                            - 0.5 * weight * w.posterior_entropy;
                    }
                }
                let g = self.encoder.backward(&c.enc, &e_bar, &mut grads.encoder);
                h_bar += g.rows(0, nh);
                h_bar_next = h_bar;
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite { what: "dynamics loss", step: 0 });
        }
        Ok(LossEval { loss: total, grad: grads.flatten(), cell_inputs, encoder_inputs })
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, batch: &[Sequence], noise: &[EncodeNoise], w: LossWeights) -> Result<f64> {
        Ok(self.loss_and_grad(batch, noise, w)?.loss)
    }
}

/// Projection directions uniform on the sphere of radius `sqrt(n)`, so that
/// `E |J v|^2 = |J|_F^2`.
pub fn projection<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    let g = Vector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let norm = g.norm();
    g * ((n as f64).sqrt() / norm)
}

/// Per-projection samples `|J(u) v|^2`, `n_projections` for each input.
pub fn penalty_samples(net: &Mlp, inputs: &[Vector], n_projections: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.dim_in();
    let mut out = Vec::with_capacity(inputs.len() * n_projections);
    for u in inputs {
        for _ in 0..n_projections {
            let v = projection(n, &mut rng);
            out.push(net.jvp(u, &v).norm_squared());
        }
    }
    out
}

/// Random-projection estimate of `|J|_F`: the square root of the mean of
/// `|J(u) v|^2` over projections and inputs.
pub fn jacobian_penalty(model: &LdmModel, inputs: &[Vector], n_projections: usize, seed: u64) -> Result<f64> {
    if n_projections == 0 {
        return Err(Error::InvalidArgument("n_projections must be at least 1".into()));
    }
    for u in inputs {
        check_dim("sequence-cell input", model.dims.sequence_input(), u.len())?;
    }
    Ok(network_penalty(&model.sequence, inputs, n_projections, seed, None))
}

/// Penalty for one network; with `grads`, also accumulates its gradient
/// with the inputs held fixed.
pub fn network_penalty(net: &Mlp, inputs: &[Vector], n_projections: usize, seed: u64, grads: Option<&mut Mlp>) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = net.dim_in();
    let count = (inputs.len() * n_projections) as f64;
    let mut acc = net.zeros_like();
    let mut sum = 0.0;
    for u in inputs {
        for _ in 0..n_projections {
            let v = projection(n, &mut rng);
            sum += net.jvp_sq_grad(u, &v, 1.0 / count, &mut acc);
        }
    }
    let value = (sum / count).sqrt();
    if let Some(g) = grads {
        // d sqrt(M) = dM / (2 sqrt(M))
        if value > 0.0 {
            let s = 0.5 / value;
            for (gl, al) in g.layers.iter_mut().zip(&acc.layers) {
                gl.w += &al.w * s;
                gl.b += &al.b * s;
            }
        }
    }
    value
}
