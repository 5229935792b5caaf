//! Variational Gaussian dequantization of categorical codes.
//!
//! A conditional network maps the one-hot encoding of all codes of a row to
//! a mean and log-variance per categorical feature. Noise is drawn as
//! `u = sigmoid(mu + sigma * eps)`, so `u` lies in (0, 1) and the
//! dequantized value `z = code + u` keeps `floor(z) == code`.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Activation, DenseNet, Matrix, Parameterized, Tape, Var};
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// Pre-sigmoid values are clamped here so `code + u` never rounds up to `code + 1`.
pub const PRE_SIGMOID_CLAMP: f64 = 30.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dequantizer {
    pub cardinalities: Vec<usize>,
    /// One-hot (sum of cardinalities) to `[mu (M), log-variance (M)]`;
    /// absent when there are no categorical features.
    pub net: Option<DenseNet>,
    /// Monte-Carlo samples for evaluation-time bounds.
    pub eval_samples: usize,
}

/// Result of dequantizing one row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dequantized {
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    /// Log-density of `u` under the noise model, including the sigmoid Jacobian.
    pub log_q: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `code + u`, nudged below `code + 1` if rounding would reach it.
fn add_noise(code: usize, u: f64) -> f64 {
    let c = code as f64;
    let z = c + u;
    if z >= c + 1.0 {
        f64::from_bits((c + 1.0).to_bits() - 1)
    } else {
        z
    }
}

impl Dequantizer {
    /// Network starts with zero output layer: `mu = 0`, log-variance `0`.
    pub fn new(cardinalities: Vec<usize>, hidden: &[usize], rng: &mut Rng) -> Self {
        let m = cardinalities.len();
        let net = (m > 0).then(|| {
            let mut widths = vec![cardinalities.iter().sum::<usize>()];
            widths.extend_from_slice(hidden);
            widths.push(2 * m);
            let mut net = DenseNet::new(&widths, Activation::Relu, Activation::Identity, rng);
            net.zero_last_layer();
            net
        });
        Self {
            cardinalities,
            net,
            eval_samples: 8,
        }
    }

    pub fn for_schema(schema: &FeatureSchema, hidden: &[usize], rng: &mut Rng) -> Self {
        Self::new(schema.cardinalities(), hidden, rng)
    }

    pub fn n_features(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn one_hot(&self, codes: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.cardinalities.iter().sum()];
        let mut off = 0;
        for (&c, &k) in codes.iter().zip(&self.cardinalities) {
            out[off + c.min(k - 1)] = 1.0;
            off += k;
        }
        out
    }

    fn check_codes(&self, codes: &[usize]) -> Result<()> {
        if codes.len() != self.cardinalities.len() {
            return Err(Error::Shape(format!(
                "expected {} codes, got {}",
                self.cardinalities.len(),
                codes.len()
            )));
        }
        if let Some((c, k)) = codes
            .iter()
            .zip(&self.cardinalities)
            .find(|(&c, &k)| c >= k)
        {
            return Err(Error::Contract(format!("code {c} out of range (cardinality {k})")));
        }
        Ok(())
    }

    /// Noise-model mean and log-variance for a row.
    pub fn noise_params(&self, codes: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_codes(codes)?;
        let Some(net) = &self.net else {
            return Ok((vec![], vec![]));
        };
        let out = net.forward(&self.one_hot(codes))?;
        let m = self.n_features();
        Ok((out[..m].to_vec(), out[m..].to_vec()))
    }

    /// Dequantizes with explicit standard-normal noise `eps`.
    pub fn dequantize_with_noise(&self, codes: &[usize], eps: &[f64]) -> Result<Dequantized> {
        let (mu, logvar) = self.noise_params(codes)?;
        if eps.len() != mu.len() {
            return Err(Error::Shape("noise length mismatch".into()));
        }
        let mut z = Vec::with_capacity(mu.len());
        let mut u = Vec::with_capacity(mu.len());
        let mut log_q = 0.0;
        for m in 0..mu.len() {
            let v = (mu[m] + (0.5 * logvar[m]).exp() * eps[m])
                .clamp(-PRE_SIGMOID_CLAMP, PRE_SIGMOID_CLAMP);
            let um = sigmoid(v);
            log_q += -0.5 * eps[m] * eps[m] - 0.5 * logvar[m] - HALF_LN_2PI
                + softplus(v)
                + softplus(-v);
            u.push(um);
            z.push(add_noise(codes[m], um));
        }
        Ok(Dequantized { z, u, log_q })
    }

    /// Dequantizes with noise drawn from `seed`.
    pub fn dequantize(&self, codes: &[usize], seed: u64) -> Result<Dequantized> {
        let mut rng = rng_from_seed(seed);
        self.dequantize_rng(codes, &mut rng)
    }

    pub fn dequantize_rng(&self, codes: &[usize], rng: &mut Rng) -> Result<Dequantized> {
        let eps: Vec<f64> = (0..self.n_features())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        self.dequantize_with_noise(codes, &eps)
    }

    /// Log-density of a given noise vector `u` in (0, 1)^M.
    pub fn log_q(&self, codes: &[usize], u: &[f64]) -> Result<f64> {
        let (mu, logvar) = self.noise_params(codes)?;
        if u.len() != mu.len() {
            return Err(Error::Shape("noise length mismatch".into()));
        }
        let mut total = 0.0;
        for m in 0..mu.len() {
            let um = u[m];
            if !(um > 0.0 && um < 1.0) {
                return Ok(f64::NEG_INFINITY);
            }
            let v = um.ln() - (-um).ln_1p();
            let sd = (0.5 * logvar[m]).exp();
            let eps = (v - mu[m]) / sd;
            total += -0.5 * eps * eps - 0.5 * logvar[m] - HALF_LN_2PI - um.ln() - (-um).ln_1p();
        }
        Ok(total)
    }

    /// Per-sample terms `log p(z) - log q(u | codes)` for `k_mc` draws.
    pub fn elbo_terms(
        &self,
        codes: &[usize],
        base_log_density: impl Fn(&[f64]) -> f64,
        k_mc: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        if k_mc == 0 {
            return Err(Error::Contract("need at least one Monte-Carlo sample".into()));
        }
        let mut rng = rng_from_seed(seed);
        (0..k_mc)
            .map(|_| {
                let d = self.dequantize_rng(codes, &mut rng)?;
                Ok(base_log_density(&d.z) - d.log_q)
            })
            .collect()
    }

    /// Monte-Carlo lower bound on the log-mass of `codes`.
    pub fn elbo(
        &self,
        codes: &[usize],
        base_log_density: impl Fn(&[f64]) -> f64,
        k_mc: usize,
        seed: u64,
    ) -> Result<f64> {
        let terms = self.elbo_terms(codes, base_log_density, k_mc, seed)?;
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }

    /// Records a batched dequantization. `codes` holds one row of codes per
    /// batch entry and `eps` the matching standard-normal noise (`B x M`).
    /// Returns `(z_cat (B x M), log_q (B x 1))`, or `None` when M = 0.
    pub fn dequantize_tape(
        &self,
        tape: &mut Tape,
        codes: &[Vec<usize>],
        eps: &Matrix,
        params: &[Var],
    ) -> Option<(Var, Var)> {
        let net = self.net.as_ref()?;
        let m = self.n_features();
        let onehots: Vec<Vec<f64>> = codes.iter().map(|c| self.one_hot(c)).collect();
        let input = tape.leaf(Matrix::from_rows(&onehots));
        let out = net.forward_tape(tape, input, params);
        let mu = tape.select_cols(out, &(0..m).collect::<Vec<_>>());
        let logvar = tape.select_cols(out, &(m..2 * m).collect::<Vec<_>>());
        let half_lv = tape.scale(logvar, 0.5);
        let sd = tape.exp(half_lv);
        let noise = tape.mul_const(sd, eps.clone());
        let v_raw = tape.add(mu, noise);
        let v = tape.clamp(v_raw, -PRE_SIGMOID_CLAMP, PRE_SIGMOID_CLAMP);
        let u = tape.sigmoid(v);
        let code_mat = Matrix::from_rows(
            &codes
                .iter()
                .map(|c| c.iter().map(|&x| x as f64).collect::<Vec<_>>())
                .collect::<Vec<_>>(),
        );
        let z = tape.add_const(u, code_mat);

        // log q = sum_m [-eps^2/2 - logvar/2 - ln(2 pi)/2 + softplus(v) + softplus(-v)]
        let sp_pos = tape.softplus(v);
        let neg_v = tape.neg(v);
        let sp_neg = tape.softplus(neg_v);
        let jac = tape.add(sp_pos, sp_neg);
        let neg_half_lv = tape.neg(half_lv);
        let per = tape.add(jac, neg_half_lv);
        let consts = eps.map(|e| -0.5 * e * e - HALF_LN_2PI);
        let per = tape.add_const(per, consts);
        let log_q = tape.sum_cols(per);
        Some((z, log_q))
    }
}

impl Parameterized for Dequantizer {
    fn params(&self) -> Vec<(String, &Matrix)> {
        self.net
            .as_ref()
            .map(|n| n.params("dequantizer"))
            .unwrap_or_default()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.net
            .as_mut()
            .map(|n| n.params_mut("dequantizer"))
            .unwrap_or_default()
    }
}

/// Maps dequantized values back to codes: `clamp(floor(z), 0, K - 1)`.
pub fn quantize(z_cat: &[f64], cardinalities: &[usize]) -> Vec<usize> {
    z_cat
        .iter()
        .zip(cardinalities)
        .map(|(&z, &k)| {
            let f = z.floor();
            if !(f >= 0.0) {
                0
            } else if f >= (k - 1) as f64 {
                k - 1
            } else {
                f as usize
            }
        })
        .collect()
}

/// Full flow vector: dequantized categorical block, then continuous block.
pub fn merge(schema: &FeatureSchema, z_cat: &[f64], x_con: &[f64]) -> Result<Vec<f64>> {
    if z_cat.len() != schema.n_categorical() || x_con.len() != schema.n_continuous() {
        return Err(Error::Shape(format!(
            "merge expects {}+{} values, got {}+{}",
            schema.n_categorical(),
            schema.n_continuous(),
            z_cat.len(),
            x_con.len()
        )));
    }
    let mut out = Vec::with_capacity(z_cat.len() + x_con.len());
    out.extend_from_slice(z_cat);
    out.extend_from_slice(x_con);
    Ok(out)
}

pub fn unmerge(schema: &FeatureSchema, full: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if full.len() != schema.full_dim() {
        return Err(Error::Shape(format!(
            "full vector has length {}, schema expects {}",
            full.len(),
            schema.full_dim()
        )));
    }
    let m = schema.n_categorical();
    Ok((full[..m].to_vec(), full[m..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::autodiff::Tape;
    use crate::data::CategoricalFeature;
    use crate::rng::rng_from_seed;

    fn deq(cards: Vec<usize>, seed: u64) -> Dequantizer {
        Dequantizer::new(cards, &[16], &mut rng_from_seed(seed))
    }

    /// Perturbs every parameter so the noise model depends on the codes.
    fn randomized(cards: Vec<usize>, seed: u64) -> Dequantizer {
        let mut d = deq(cards, seed);
        let mut rng = rng_from_seed(seed + 100);
        for (_, p) in d.params_mut() {
            for v in p.data.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *v += 0.3 * e;
            }
        }
        d
    }

    fn schema(m: usize, j: usize) -> FeatureSchema {
        FeatureSchema::new(
            (0..j).map(|i| format!("x{i}")).collect(),
            (0..m)
                .map(|i| CategoricalFeature {
                    name: format!("c{i}"),
                    cardinality: 5,
                    values: None,
                })
                .collect(),
            "y",
            2,
        )
        .unwrap()
    }

    #[test]
    fn floor_recovers_code_for_all_small_codes_and_seeds() {
        let d = randomized(vec![2, 3, 4], 1);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for seed in 0..20 {
                        let codes = [a, b, c];
                        let out = d.dequantize(&codes, seed).unwrap();
                        assert!(out.u.iter().all(|&u| u > 0.0 && u < 1.0));
                        assert_eq!(quantize(&out.z, &d.cardinalities), codes.to_vec());
                        for (z, &code) in out.z.iter().zip(&codes) {
                            assert_eq!(z.floor() as usize, code);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn extreme_noise_stays_below_next_code() {
        let d = deq(vec![300], 0);
        let out = d.dequantize_with_noise(&[299], &[1e6]).unwrap();
        assert_eq!(out.z[0].floor(), 299.0);
    }

    #[test]
    fn vanishing_variance_gives_midpoint() {
        let mut d = deq(vec![4], 2);
        let net = d.net.as_mut().unwrap();
        let last = net.layers.last_mut().unwrap();
        last.bias.data[1] = -80.0; // log-variance
        let out = d.dequantize(&[2], 9).unwrap();
        assert!((out.u[0] - 0.5).abs() < 1e-12);
        assert!((out.z[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn log_q_matches_change_of_variables_oracle() {
        let d = randomized(vec![3], 4);
        let codes = [1usize];
        let out = d.dequantize(&codes, 77).unwrap();
        let (mu, lv) = d.noise_params(&codes).unwrap();
        let u = out.u[0];
        let v = (u / (1.0 - u)).ln();
        let var = lv[0].exp();
        let gauss = -0.5 * (v - mu[0]).powi(2) / var - 0.5 * (2.0 * PI * var).ln();
        let oracle = gauss - (u * (1.0 - u)).ln();
        assert!((out.log_q - oracle).abs() < 1e-9, "{} vs {}", out.log_q, oracle);
        assert!((d.log_q(&codes, &out.u).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn tape_path_matches_plain_path() {
        let d = randomized(vec![3, 2], 5);
        let codes = vec![vec![2, 0], vec![0, 1]];
        let eps = Matrix::from_rows(&[vec![0.3, -1.2], vec![1.7, 0.1]]);
        let mut tape = Tape::new();
        let params = d.register(&mut tape);
        let (z, lq) = d.dequantize_tape(&mut tape, &codes, &eps, &params).unwrap();
        for (r, c) in codes.iter().enumerate() {
            let plain = d.dequantize_with_noise(c, eps.row(r)).unwrap();
            for m in 0..2 {
                assert!((tape.value(z).get(r, m) - plain.z[m]).abs() < 1e-12);
            }
            assert!((tape.value(lq).get(r, 0) - plain.log_q).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_floors_and_clamps() {
        assert_eq!(quantize(&[2.7], &[5]), vec![2]);
        assert_eq!(quantize(&[-0.3], &[5]), vec![0]);
        assert_eq!(quantize(&[6.2], &[5]), vec![4]);
        assert_eq!(quantize(&[f64::NAN], &[5]), vec![0]);
    }

    #[test]
    fn merge_and_unmerge() {
        let s = schema(1, 2);
        let full = merge(&s, &[1.3], &[0.5, -0.2]).unwrap();
        assert_eq!(full, vec![1.3, 0.5, -0.2]);
        assert_eq!(unmerge(&s, &full).unwrap(), (vec![1.3], vec![0.5, -0.2]));
        let s0 = schema(1, 0);
        assert_eq!(merge(&s0, &[1.3], &[]).unwrap(), vec![1.3]);
        assert!(merge(&s, &[1.3], &[0.5]).is_err());
        assert!(unmerge(&s, &[1.0]).is_err());
    }

    #[test]
    fn no_categoricals_means_no_dequantization() {
        let d = deq(vec![], 0);
        let out = d.dequantize(&[], 3).unwrap();
        assert!(out.z.is_empty());
        assert_eq!(out.log_q, 0.0);
        assert!(d.params().is_empty());
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut total = f(a) + f(b);
        for i in 1..n {
            total += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        total * h / 3.0
    }

    #[test]
    fn importance_weights_match_quadrature_mass() {
        let d = randomized(vec![3], 21);
        let (mean, sd) = (1.3, 0.8);
        let log_p = move |z: &[f64]| -0.5 * ((z[0] - mean) / sd).powi(2) - sd.ln() - HALF_LN_2PI;
        let k = 10_000;
        for code in 0..3 {
            let mass = simpson(|z| log_p(&[z]).exp(), code as f64, code as f64 + 1.0, 2000);
            let w: Vec<f64> = d.elbo_terms(&[code], log_p, k, 5).unwrap().iter().map(|t| t.exp()).collect();
            let w_mean = w.iter().sum::<f64>() / k as f64;
            let w_var = w.iter().map(|x| (x - w_mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            let se = (w_var / k as f64).sqrt();
            assert!((w_mean - mass).abs() < 3.0 * se, "code {code}: {w_mean} vs {mass} (se {se})");
            // and the bound sits below the exact log-mass
            assert!(d.elbo(&[code], log_p, k, 6).unwrap() <= mass.ln());
        }
    }

    #[test]
    fn elbo_sample_count_does_not_shift_the_mean() {
        let d = randomized(vec![4], 3);
        let log_p = |z: &[f64]| -0.5 * (z[0] - 2.0).powi(2) - HALF_LN_2PI;
        let runs = |k: usize| -> (f64, f64) {
            let v: Vec<f64> = (0..200).map(|s| d.elbo(&[2], log_p, k, 1000 * k as u64 + s).unwrap()).collect();
            let m = v.iter().sum::<f64>() / 200.0;
            (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 199.0)
        };
        let ((m1, v1), (m64, v64)) = (runs(1), runs(64));
        let se = (v1 / 200.0 + v64 / 200.0).sqrt();
        assert!((m1 - m64).abs() < 3.0 * se, "{m1} vs {m64} (se {se})");
    }

    #[test]
    fn elbo_is_tight_when_q_matches_the_posterior() {
        // base density p(z) = P(code) * q(z - code | code) makes every term log P(code)
        let d = randomized(vec![3], 8);
        let mass = [0.2f64, 0.5, 0.3];
        let base = |z: &[f64]| {
            let c = z[0].floor() as usize;
            mass[c].ln() + d.log_q(&[c], &[z[0] - c as f64]).unwrap()
        };
        for seed in 0..5 {
            let terms = d.elbo_terms(&[1], base, 16, seed).unwrap();
            for t in terms {
                assert!((t - mass[1].ln()).abs() < 1e-9);
            }
        }
    }
}
