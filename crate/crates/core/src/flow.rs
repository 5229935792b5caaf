//! Affine-coupling normalizing flow with a Gaussian-mixture latent.
//!
//! Each coupling layer keeps the masked coordinates fixed and applies
//! `x * exp(s) + t` to the others, with `s` and `t` computed from the masked
//! coordinates only. The Jacobian is triangular, so the log-determinant is
//! the sum of the applied log-scales. Log-scales are soft-clamped to
//! `[-c, c]` via `c * tanh(s / c)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Activation, DenseNet, Matrix, Parameterized, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SCALE_CLAMP: f64 = 2.0;
pub const DEFAULT_LAYERS: usize = 8;

/// Coupling-net hidden width used when none is configured.
pub fn default_hidden_width(dim: usize) -> usize {
    64.max(8 * dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    /// 1 = passed through (conditioning), 0 = transformed.
    pub mask: Vec<f64>,
    pub scale_net: DenseNet,
    pub translate_net: DenseNet,
    pub scale_clamp: f64,
}

impl CouplingLayer {
    /// Builds a layer whose scale and translate nets output zero, so the
    /// layer starts as the identity.
    pub fn identity_init(mask: Vec<f64>, hidden: &[usize], scale_clamp: f64, rng: &mut Rng) -> Result<Self> {
        let d = mask.len();
        let mut widths = vec![d];
        widths.extend_from_slice(hidden);
        widths.push(d);
        let mut scale_net = DenseNet::new(&widths, Activation::Relu, Activation::Identity, rng);
        let mut translate_net = DenseNet::new(&widths, Activation::Relu, Activation::Identity, rng);
        scale_net.zero_last_layer();
        translate_net.zero_last_layer();
        Self::new(mask, scale_net, translate_net, scale_clamp)
    }

    pub fn new(mask: Vec<f64>, scale_net: DenseNet, translate_net: DenseNet, scale_clamp: f64) -> Result<Self> {
        let d = mask.len();
        if d == 0 {
            return Err(Error::Shape("coupling layer of dimension 0".into()));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract("mask entries must be 0 or 1".into()));
        }
        if !mask.contains(&0.0) || (d >= 2 && !mask.contains(&1.0)) {
            return Err(Error::Contract(
                "mask needs a transformed coordinate and, for D >= 2, a conditioning one".into(),
            ));
        }
        for (net, what) in [(&scale_net, "scale"), (&translate_net, "translate")] {
            if net.in_dim() != d || net.out_dim() != d {
                return Err(Error::Shape(format!("{what} net must map {d} -> {d}")));
            }
        }
        if !(scale_clamp > 0.0) {
            return Err(Error::Contract("scale clamp must be positive".into()));
        }
        Ok(Self {
            mask,
            scale_net,
            translate_net,
            scale_clamp,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    fn masked(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mask).map(|(v, m)| v * m).collect()
    }

    /// Clamped log-scales and translations for a conditioning input.
    fn scale_shift(&self, conditioning: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.scale_clamp;
        let s = self.scale_net.forward(conditioning)?;
        let t = self.translate_net.forward(conditioning)?;
        let s = s
            .iter()
            .zip(&self.mask)
            .map(|(v, m)| if *m == 0.0 { c * (v / c).tanh() } else { 0.0 })
            .collect();
        let t = t
            .iter()
            .zip(&self.mask)
            .map(|(v, m)| if *m == 0.0 { *v } else { 0.0 })
            .collect();
        Ok((s, t))
    }

    /// Per-coordinate log-scale applied to `x` (zero on masked coordinates).
    pub fn log_scales(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.scale_shift(&self.masked(x))?.0)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!("layer expects {} values, got {}", self.dim(), x.len())));
        }
        let (s, t) = self.scale_shift(&self.masked(x))?;
        let y = x
            .iter()
            .zip(s.iter().zip(&t))
            .map(|(v, (s, t))| v * s.exp() + t)
            .collect();
        Ok((y, s.iter().sum()))
    }

    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.dim() {
            return Err(Error::Shape(format!("layer expects {} values, got {}", self.dim(), y.len())));
        }
        let (s, t) = self.scale_shift(&self.masked(y))?;
        Ok(y.iter()
            .zip(s.iter().zip(&t))
            .map(|(v, (s, t))| (v - t) * (-s).exp())
            .collect())
    }

    /// Records the layer on a tape: returns `(y (B x D), logdet (B x 1))`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> (Var, Var) {
        let n_s = self.scale_net.num_tensors();
        let mask = Matrix::row_vector(self.mask.clone());
        let free = Matrix::row_vector(self.mask.iter().map(|m| 1.0 - m).collect());
        let xm = tape.mul_const(x, mask);
        let s = self.scale_net.forward_tape(tape, xm, &params[..n_s]);
        let t = self.translate_net.forward_tape(tape, xm, &params[n_s..]);
        let s = tape.scale(s, 1.0 / self.scale_clamp);
        let s = tape.tanh(s);
        let s = tape.scale(s, self.scale_clamp);
        let s = tape.mul_const(s, free.clone());
        let e = tape.exp(s);
        let xe = tape.mul(x, e);
        let t = tape.mul_const(t, free);
        let y = tape.add(xe, t);
        let logdet = tape.sum_cols(s);
        (y, logdet)
    }

    fn num_tensors(&self) -> usize {
        self.scale_net.num_tensors() + self.translate_net.num_tensors()
    }
}

/// Default mask for layer `index` of a `dim`-dimensional flow. Layers come
/// in pairs with complementary masks; pair `p` splits coordinates on bit
/// `p mod ceil(log2 dim)` of their index, so successive pairs condition on
/// different coordinate groups and categorical and continuous coordinates
/// get mixed.
pub fn default_mask(dim: usize, index: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![0.0];
    }
    let bits = usize::BITS - (dim - 1).leading_zeros();
    let bit = (index / 2) % bits as usize;
    let flip = index % 2;
    (0..dim)
        .map(|j| (((j >> bit) & 1) ^ flip) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub layers: Vec<CouplingLayer>,
}

impl FlowModel {
    /// Empty flow (the identity map).
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: vec![] }
    }

    /// `n_layers` identity-initialized coupling layers with default masks.
    pub fn new(dim: usize, n_layers: usize, hidden: &[usize], scale_clamp: f64, rng: &mut Rng) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|i| CouplingLayer::identity_init(default_mask(dim, i), hidden, scale_clamp, rng))
            .collect::<Result<_>>()?;
        Self::from_layers(dim, layers)
    }

    pub fn from_layers(dim: usize, layers: Vec<CouplingLayer>) -> Result<Self> {
        if let Some((i, _)) = layers.iter().enumerate().find(|(_, l)| l.dim() != dim) {
            return Err(Error::Shape(format!("layer {i} has the wrong dimension")));
        }
        Ok(Self { dim, layers })
    }

    /// `x -> (z, log|det dz/dx|)`.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!("flow expects {} values, got {}", self.dim, x.len())));
        }
        let mut z = x.to_vec();
        let mut total = 0.0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, ld) = layer.forward(&z).map_err(|e| Error::Numerical {
                layer: i,
                message: e.to_string(),
            })?;
            if !ld.is_finite() || y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: i,
                    message: "non-finite forward output".into(),
                });
            }
            z = y;
            total += ld;
        }
        Ok((z, total))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::Shape(format!("flow expects {} values, got {}", self.dim, z.len())));
        }
        let mut x = z.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x = layer.inverse(&x).map_err(|e| Error::Numerical {
                layer: i,
                message: e.to_string(),
            })?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    layer: i,
                    message: "non-finite inverse output".into(),
                });
            }
        }
        Ok(x)
    }

    /// Records the full flow: `(z (B x D), total logdet (B x 1))`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> (Var, Var) {
        let rows = tape.value(x).rows;
        let mut logdet = tape.leaf(Matrix::zeros(rows, 1));
        let mut z = x;
        let mut off = 0;
        for layer in &self.layers {
            let n = layer.num_tensors();
            let (y, ld) = layer.forward_tape(tape, z, &params[off..off + n]);
            off += n;
            z = y;
            logdet = tape.add(logdet, ld);
        }
        (z, logdet)
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.scale_net.all_finite() && l.translate_net.all_finite())
    }
}

impl Parameterized for FlowModel {
    fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.scale_net.params(&format!("flow.{i}.scale")));
            out.extend(l.translate_net.params(&format!("flow.{i}.translate")));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.scale_net.params_mut(&format!("flow.{i}.scale")));
            out.extend(l.translate_net.params_mut(&format!("flow.{i}.translate")));
        }
        out
    }
}

/// Class-conditional latent: `N(mu_k, I)` per class, mixed with fixed weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGmm {
    pub means: Vec<Vec<f64>>,
    /// Mixture weights; uniform `1/C` unless an empirical prior is requested.
    pub weights: Vec<f64>,
}

impl LatentGmm {
    pub fn new(means: Vec<Vec<f64>>) -> Result<Self> {
        let c = means.len();
        Self::with_weights(means, vec![1.0 / c as f64; c])
    }

    pub fn with_weights(means: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if means.is_empty() || weights.len() != means.len() {
            return Err(Error::Shape("need one weight per mixture component".into()));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::Contract("component means must be finite and equally sized".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Contract("mixture weights must be positive and sum to 1".into()));
        }
        Ok(Self { means, weights })
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log N(z; mu_k, I)`.
    pub fn component_log_density(&self, z: &[f64], k: usize) -> f64 {
        gaussian_log_density(z, &self.means[k])
    }

    /// `log sum_k w_k N(z; mu_k, I)`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.n_components())
            .map(|k| self.weights[k].ln() + self.component_log_density(z, k))
            .collect();
        log_sum_exp(&terms)
    }
}

/// Log-density of `N(mean, I)` at `z`.
pub fn gaussian_log_density(z: &[f64], mean: &[f64]) -> f64 {
    let sq: f64 = z.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * sq - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}

pub fn log_prob_conditional(flow: &FlowModel, gmm: &LatentGmm, x_full: &[f64], k: usize) -> Result<f64> {
    if k >= gmm.n_components() {
        return Err(Error::Contract(format!(
            "class {k} out of range for {} components",
            gmm.n_components()
        )));
    }
    let (z, logdet) = flow.forward(x_full)?;
    Ok(gmm.component_log_density(&z, k) + logdet)
}

pub fn log_prob_marginal(flow: &FlowModel, gmm: &LatentGmm, x_full: &[f64]) -> Result<f64> {
    let (z, logdet) = flow.forward(x_full)?;
    Ok(gmm.log_density(&z) + logdet)
}
