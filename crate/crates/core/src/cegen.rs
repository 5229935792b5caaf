//! Counterfactual generation by latent translation.
//!
//! An instance is dequantized and mapped to the latent space, shifted by
//! `alpha` times the difference of empirical class means, mapped back, and
//! its categorical block is quantized to codes.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::{Dataset, Instance};
use crate::dequant::{merge, quantize, unmerge, Dequantizer};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::rng::derive_seed;

/// Empirical latent mean of each predicted class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub means: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub seed: u64,
}

impl ClassMeans {
    pub fn n_classes(&self) -> usize {
        self.means.len()
    }
}

/// Groups rows by the classifier's prediction and averages their latent codes.
/// Row `i` is dequantized with seed `derive_seed(seed, i)`.
pub fn compute_class_means(
    flow: &FlowModel,
    deq: &Dequantizer,
    classifier: &Classifier,
    dataset: &Dataset,
    seed: u64,
) -> Result<ClassMeans> {
    if dataset.is_empty() {
        return Err(Error::Setup("class means need a non-empty dataset".into()));
    }
    let schema = &classifier.schema;
    let predicted = classifier.predict_dataset(dataset)?;
    let latents = dataset
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let d = deq.dequantize(&row.categorical, derive_seed(seed, i as u64))?;
            Ok(flow.forward(&merge(schema, &d.z, &row.continuous)?)?.0)
        })
        .collect::<Result<Vec<_>>>()?;

    let c = schema.classes;
    let mut sums = vec![vec![0.0; flow.dim]; c];
    let mut counts = vec![0usize; c];
    for (z, &k) in latents.iter().zip(&predicted) {
        counts[k] += 1;
        sums[k].iter_mut().zip(z).for_each(|(s, v)| *s += v);
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Setup(format!("no instance is predicted as class {k}")));
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| s.into_iter().map(|v| v / n as f64).collect())
        .collect();
    Ok(ClassMeans { means, counts, seed })
}

/// Latent direction from `y_org` to `y_cf`. `signed = false` gives the
/// elementwise absolute difference instead.
pub fn translation_vector(means: &ClassMeans, y_org: usize, y_cf: usize, signed: bool) -> Result<Vec<f64>> {
    let c = means.n_classes();
    if y_org >= c || y_cf >= c {
        return Err(Error::Contract(format!("classes {y_org} -> {y_cf} out of range for {c}")));
    }
    if y_org == y_cf {
        return Err(Error::Contract(format!("instance is already predicted as class {y_cf}")));
    }
    Ok(means.means[y_cf]
        .iter()
        .zip(&means.means[y_org])
        .map(|(t, o)| if signed { t - o } else { (t - o).abs() })
        .collect())
}

/// `0.1, 0.2, ..., max`.
pub fn default_alpha_grid(max: f64) -> Vec<f64> {
    let n = (max * 10.0 + 1e-9).floor() as usize;
    (1..=n).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AlphaMode {
    Fixed(f64),
    Search(Vec<f64>),
}

impl FromStr for AlphaMode {
    type Err = String;

    /// `search`, `search:<max>` or `fixed:<value>`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("expected 'search', 'search:<max>' or 'fixed:<value>', got '{s}'");
        let parse = |v: &str| v.parse::<f64>().ok().filter(|a| *a >= 0.0 && a.is_finite()).ok_or_else(bad);
        match s.split_once(':') {
            None if s == "search" => Ok(AlphaMode::Search(default_alpha_grid(2.0))),
            Some(("search", max)) => Ok(AlphaMode::Search(default_alpha_grid(parse(max)?))),
            Some(("fixed", v)) => Ok(AlphaMode::Fixed(parse(v)?)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub y_org: usize,
    pub y_cf: usize,
    /// Standardized continuous values.
    pub continuous: Vec<f64>,
    pub continuous_raw: Vec<f64>,
    pub categorical: Vec<usize>,
    /// `None` for methods without a latent step.
    pub alpha: Option<f64>,
    pub success: bool,
    /// Euclidean length of the latent displacement.
    pub latent_shift: Option<f64>,
    pub wall_time_s: f64,
}

impl CounterfactualResult {
    /// The counterfactual in standardized units.
    pub fn instance(&self) -> Instance {
        Instance::new(self.continuous.clone(), self.categorical.clone())
    }
}

/// Explainer over trained, immutable artifacts.
#[derive(Debug, Clone, Copy)]
pub struct CeFlow<'a> {
    pub flow: &'a FlowModel,
    pub dequantizer: &'a Dequantizer,
    pub means: &'a ClassMeans,
    pub classifier: &'a Classifier,
    pub signed: bool,
}

struct Prepared {
    y_org: usize,
    z: Vec<f64>,
    delta: Vec<f64>,
    delta_norm: f64,
}

impl<'a> CeFlow<'a> {
    pub fn new(flow: &'a FlowModel, dequantizer: &'a Dequantizer, means: &'a ClassMeans, classifier: &'a Classifier) -> Self {
        Self {
            flow,
            dequantizer,
            means,
            classifier,
            signed: true,
        }
    }

    pub fn with_signed(self, signed: bool) -> Self {
        Self { signed, ..self }
    }

    /// Latent code of a standardized instance.
    pub fn encode(&self, x: &Instance, seed: u64) -> Result<Vec<f64>> {
        let schema = &self.classifier.schema;
        x.check(schema)?;
        let d = self.dequantizer.dequantize(&x.categorical, seed)?;
        Ok(self.flow.forward(&merge(schema, &d.z, &x.continuous)?)?.0)
    }

    /// Inverts a latent code and quantizes its categorical block.
    pub fn decode(&self, z: &[f64]) -> Result<Instance> {
        let schema = &self.classifier.schema;
        let full = self.flow.inverse(z)?;
        let (z_cat, con) = unmerge(schema, &full)?;
        Ok(Instance::new(con, quantize(&z_cat, &schema.cardinalities())))
    }

    fn prepare(&self, x: &Instance, y_cf: usize, seed: u64) -> Result<Prepared> {
        let y_org = self.classifier.predict(x)?;
        let delta = translation_vector(self.means, y_org, y_cf, self.signed)?;
        let delta_norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(Prepared {
            y_org,
            z: self.encode(x, seed)?,
            delta,
            delta_norm,
        })
    }

    fn shifted(&self, p: &Prepared, y_cf: usize, alpha: f64) -> Result<CounterfactualResult> {
        if !(alpha >= 0.0) {
            return Err(Error::Contract(format!("alpha must be non-negative, got {alpha}")));
        }
        let z: Vec<f64> = p.z.iter().zip(&p.delta).map(|(z, d)| z + alpha * d).collect();
        let cf = self.decode(&z)?;
        let success = self.classifier.predict(&cf)? == y_cf;
        Ok(CounterfactualResult {
            y_org: p.y_org,
            y_cf,
            continuous_raw: self.classifier.standardizer.destandardize_row(&cf.continuous),
            continuous: cf.continuous,
            categorical: cf.categorical,
            alpha: Some(alpha),
            success,
            latent_shift: Some(alpha * p.delta_norm),
            wall_time_s: 0.0,
        })
    }

    /// Counterfactual at a fixed `alpha`.
    pub fn generate(&self, x: &Instance, y_cf: usize, alpha: f64, seed: u64) -> Result<CounterfactualResult> {
        let start = Instant::now();
        let p = self.prepare(x, y_cf, seed)?;
        let mut out = self.shifted(&p, y_cf, alpha)?;
        out.wall_time_s = start.elapsed().as_secs_f64();
        Ok(out)
    }

    /// Result at the smallest grid value that reaches `y_cf`, else the result
    /// at the largest grid value with `success = false`.
    pub fn alpha_search(&self, x: &Instance, y_cf: usize, grid: &[f64], seed: u64) -> Result<CounterfactualResult> {
        if grid.is_empty() || grid.windows(2).any(|w| !(w[0] < w[1])) || !(grid[0] >= 0.0) {
            return Err(Error::Contract("alpha grid must be non-empty, ascending and non-negative".into()));
        }
        let start = Instant::now();
        let p = self.prepare(x, y_cf, seed)?;
        let mut last = None;
        for &alpha in grid {
            let r = self.shifted(&p, y_cf, alpha)?;
            if r.success {
                last = Some(r);
                break;
            }
            last = Some(r);
        }
        let mut out = last.expect("grid is non-empty");
        out.wall_time_s = start.elapsed().as_secs_f64();
        Ok(out)
    }

    pub fn explain(&self, x: &Instance, y_cf: usize, mode: &AlphaMode, seed: u64) -> Result<CounterfactualResult> {
        match mode {
            AlphaMode::Fixed(a) => self.generate(x, y_cf, *a, seed),
            AlphaMode::Search(grid) => self.alpha_search(x, y_cf, grid, seed),
        }
    }

    /// Explains every row in parallel; row `i` uses seed `derive_seed(seed, i)`
    /// and results keep input order.
    pub fn explain_batch(
        &self,
        rows: &[Instance],
        targets: &[usize],
        mode: &AlphaMode,
        seed: u64,
    ) -> Result<Vec<CounterfactualResult>> {
        if rows.len() != targets.len() {
            return Err(Error::Shape("one target per row".into()));
        }
        rows.par_iter()
            .zip(targets)
            .enumerate()
            .map(|(i, (x, &y))| self.explain(x, y, mode, derive_seed(seed, i as u64)))
            .collect()
    }
}
