//! Sampling baselines: growing spheres and random perturbation.
//!
//! Both search in the classifier's input space (standardized continuous
//! values followed by one-hot blocks) and decode each candidate's
//! categorical blocks to the code with the largest entry.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::cegen::CounterfactualResult;
use crate::classifier::{argmax, encode, Classifier};
use crate::data::{FeatureSchema, Instance};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowingSpheresConfig {
    /// Inner radius of the first annulus.
    pub initial_radius: f64,
    /// Annulus width and growth step.
    pub step: f64,
    /// Candidates per annulus.
    pub samples: usize,
    pub max_radius: f64,
}

impl Default for GrowingSpheresConfig {
    fn default() -> Self {
        Self {
            initial_radius: 0.0,
            step: 0.1,
            samples: 200,
            max_radius: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomConfig {
    /// Standard deviation of continuous noise.
    pub sigma: f64,
    /// Probability of redrawing each categorical code.
    pub resample_prob: f64,
    pub attempts: usize,
}

impl Default for RandomConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            resample_prob: 0.2,
            attempts: 1000,
        }
    }
}

/// Splits an encoded row into continuous values and argmax codes.
pub fn decode(schema: &FeatureSchema, encoded: &[f64]) -> Instance {
    let j = schema.n_continuous();
    let mut off = j;
    let codes = schema
        .categorical
        .iter()
        .map(|f| {
            let c = argmax(&encoded[off..off + f.cardinality]);
            off += f.cardinality;
            c
        })
        .collect();
    Instance::new(encoded[..j].to_vec(), codes)
}

fn result(clf: &Classifier, y_org: usize, y_cf: usize, cf: Instance, success: bool, start: Instant) -> CounterfactualResult {
    CounterfactualResult {
        y_org,
        y_cf,
        continuous_raw: clf.standardizer.destandardize_row(&cf.continuous),
        continuous: cf.continuous,
        categorical: cf.categorical,
        alpha: None,
        success,
        latent_shift: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    }
}

/// Uniform sample from the shell `lo <= |v| < hi` in `dim` dimensions.
fn sample_annulus(dim: usize, lo: f64, hi: f64, rng: &mut Rng) -> Vec<f64> {
    let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d = dim as f64;
    let u: f64 = rng.random();
    let radius = (lo.powf(d) + u * (hi.powf(d) - lo.powf(d))).powf(1.0 / d);
    dir.iter_mut().for_each(|v| *v *= radius / norm);
    dir
}

/// Samples annuli of growing radius around `x` until a decoded candidate is
/// predicted as `y_cf`; returns the first such candidate.
pub fn growing_spheres(
    classifier: &Classifier,
    x: &Instance,
    y_cf: usize,
    config: &GrowingSpheresConfig,
    seed: u64,
) -> Result<CounterfactualResult> {
    if !(config.step > 0.0) || config.samples == 0 || !(config.initial_radius >= 0.0) {
        return Err(Error::Contract("growing spheres needs a positive step and sample count".into()));
    }
    let start = Instant::now();
    let schema = &classifier.schema;
    let y_org = classifier.predict(x)?;
    if y_org == y_cf {
        return Ok(result(classifier, y_org, y_cf, x.clone(), true, start));
    }
    let origin = encode(schema, &x.continuous, &x.categorical);
    let dim = origin.len();
    let mut rng = rng_from_seed(seed);
    let mut r = config.initial_radius;
    while r < config.max_radius {
        let candidates: Vec<Instance> = (0..config.samples)
            .map(|_| {
                let v = sample_annulus(dim, r, r + config.step, &mut rng);
                let p: Vec<f64> = origin.iter().zip(&v).map(|(a, b)| a + b).collect();
                decode(schema, &p)
            })
            .collect();
        let encoded: Vec<Vec<f64>> = candidates
            .iter()
            .map(|c| encode(schema, &c.continuous, &c.categorical))
            .collect();
        let preds = classifier.predict_encoded_batch(&Matrix::from_rows(&encoded))?;
        if let Some(i) = preds.iter().position(|&p| p == y_cf) {
            return Ok(result(classifier, y_org, y_cf, candidates[i].clone(), true, start));
        }
        r += config.step;
    }
    Ok(result(classifier, y_org, y_cf, x.clone(), false, start))
}

/// Gaussian perturbation of continuous values plus random code redraws,
/// returning the first attempt predicted as `y_cf`.
pub fn random_perturbation(
    classifier: &Classifier,
    x: &Instance,
    y_cf: usize,
    config: &RandomConfig,
    seed: u64,
) -> Result<CounterfactualResult> {
    let start = Instant::now();
    let schema = &classifier.schema;
    let y_org = classifier.predict(x)?;
    let mut rng = rng_from_seed(seed);
    for _ in 0..config.attempts {
        let continuous = x
            .continuous
            .iter()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut rng);
                v + config.sigma * e
            })
            .collect();
        let categorical = x
            .categorical
            .iter()
            .zip(&schema.categorical)
            .map(|(&c, f)| {
                if rng.random::<f64>() < config.resample_prob {
                    rng.random_range(0..f.cardinality)
                } else {
                    c
                }
            })
            .collect();
        let cand = Instance::new(continuous, categorical);
        if classifier.predict(&cand)? == y_cf {
            return Ok(result(classifier, y_org, y_cf, cand, true, start));
        }
    }
    Ok(result(classifier, y_org, y_cf, x.clone(), false, start))
}
