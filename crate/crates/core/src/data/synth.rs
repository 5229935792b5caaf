//! Synthetic mixed-type classification data with a controllable class gap.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Instance};
use super::schema::{CategoricalFeature, FeatureSchema};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Probability mass on the class-preferred category.
pub const PREFERRED_MASS: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub continuous: usize,
    pub cardinalities: Vec<usize>,
    pub classes: usize,
    /// Distance between class means of the continuous block (unit variance).
    pub separation: f64,
}

impl SynthSpec {
    pub fn new(continuous: usize, categorical: usize, cardinality: usize, classes: usize, separation: f64) -> Self {
        Self {
            continuous,
            cardinalities: vec![cardinality; categorical],
            classes,
            separation,
        }
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            (0..self.continuous).map(|j| format!("x{j}")).collect(),
            self.cardinalities
                .iter()
                .enumerate()
                .map(|(m, &k)| CategoricalFeature {
                    name: format!("c{m}"),
                    cardinality: k,
                    values: Some((0..k).map(|v| format!("v{v}")).collect()),
                })
                .collect(),
            "y",
            self.classes,
        )
    }

    /// Class mean of the continuous block. With at least as many features as
    /// classes the means sit on scaled coordinate axes (pairwise distance
    /// exactly `separation`); otherwise they are spaced along the first axis.
    pub fn class_mean(&self, k: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.continuous];
        if self.continuous == 0 {
            return mu;
        }
        if self.classes <= self.continuous {
            mu[k] = self.separation / std::f64::consts::SQRT_2;
        } else {
            mu[0] = self.separation * k as f64;
        }
        mu
    }

    /// Category favored by class `k` for feature `m`.
    pub fn preferred_category(&self, k: usize, m: usize) -> usize {
        (k + m) % self.cardinalities[m]
    }
}

/// Draws `n` raw-unit rows with labels balanced to within one.
pub fn synth_generate(seed: u64, n: usize, spec: &SynthSpec) -> Result<Dataset> {
    if !(spec.separation > 0.0) {
        return Err(Error::Contract("separation must be positive".into()));
    }
    let schema = spec.schema()?;
    let mut rng = rng_from_seed(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);

    let means: Vec<Vec<f64>> = (0..spec.classes).map(|k| spec.class_mean(k)).collect();
    let rows = labels
        .iter()
        .map(|&k| {
            let continuous = means[k]
                .iter()
                .map(|m| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    m + e
                })
                .collect();
            let categorical = spec
                .cardinalities
                .iter()
                .enumerate()
                .map(|(m, &card)| {
                    let pref = spec.preferred_category(k, m);
                    if rng.random::<f64>() < PREFERRED_MASS {
                        pref
                    } else {
                        // uniform over the remaining categories
                        let r = rng.random_range(0..card - 1);
                        if r >= pref {
                            r + 1
                        } else {
                            r
                        }
                    }
                })
                .collect();
            Instance::new(continuous, categorical)
        })
        .collect();
    Dataset::new(schema, rows, labels)
}
