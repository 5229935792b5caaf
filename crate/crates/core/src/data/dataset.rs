use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::schema::FeatureSchema;
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One tabular row: continuous values (J) and categorical codes (M).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub continuous: Vec<f64>,
    pub categorical: Vec<usize>,
}

impl Instance {
    pub fn new(continuous: Vec<f64>, categorical: Vec<usize>) -> Self {
        Self {
            continuous,
            categorical,
        }
    }

    pub fn check(&self, schema: &FeatureSchema) -> Result<()> {
        if self.continuous.len() != schema.n_continuous()
            || self.categorical.len() != schema.n_categorical()
        {
            return Err(Error::Shape(format!(
                "instance has {}+{} features, schema expects {}+{}",
                self.continuous.len(),
                self.categorical.len(),
                schema.n_continuous(),
                schema.n_categorical()
            )));
        }
        for (code, feat) in self.categorical.iter().zip(&schema.categorical) {
            if *code >= feat.cardinality {
                return Err(Error::Contract(format!(
                    "code {code} out of range for `{}` (cardinality {})",
                    feat.name, feat.cardinality
                )));
            }
        }
        Ok(())
    }
}

/// Per-feature affine map between raw and standardized continuous units.
/// Statistics use the population (1/N) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Instance], schema: &FeatureSchema) -> Result<Self> {
        let j = schema.n_continuous();
        if rows.is_empty() && j > 0 {
            return Err(Error::Ingestion("cannot fit standardization on zero rows".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; j];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(&r.continuous) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; j];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(&r.continuous).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        for (name, s) in schema.continuous.iter().zip(&std) {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::Ingestion(format!(
                    "column `{name}` has zero variance"
                )));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn identity(j: usize) -> Self {
        Self {
            mean: vec![0.0; j],
            std: vec![1.0; j],
        }
    }

    pub fn standardize_row(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn destandardize_row(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub rows: Vec<Instance>,
    pub labels: Vec<usize>,
    /// `Some` when `rows` hold standardized continuous values.
    pub standardizer: Option<Standardizer>,
    /// Per categorical feature: the raw value for each code.
    pub category_values: Vec<Vec<String>>,
    /// Rows skipped during ingestion.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Instance>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        for (r, &y) in rows.iter().zip(&labels) {
            r.check(&schema)?;
            if y >= schema.classes {
                return Err(Error::Contract(format!(
                    "label {y} out of range for {} classes",
                    schema.classes
                )));
            }
            if r.continuous.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite continuous value".into()));
            }
        }
        let category_values = schema
            .categorical
            .iter()
            .map(|c| {
                c.values
                    .clone()
                    .unwrap_or_else(|| (0..c.cardinality).map(|k| k.to_string()).collect())
            })
            .collect();
        Ok(Self {
            schema,
            rows,
            labels,
            standardizer: None,
            category_values,
            dropped_rows: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn is_standardized(&self) -> bool {
        self.standardizer.is_some()
    }

    /// Fits statistics on this dataset and returns the standardized copy.
    pub fn standardize(&self) -> Result<(Dataset, Standardizer)> {
        let st = Standardizer::fit(&self.rows, &self.schema)?;
        let out = self.standardize_with(&st)?;
        Ok((out, st))
    }

    /// Applies statistics fitted elsewhere (normally on the training split).
    pub fn standardize_with(&self, st: &Standardizer) -> Result<Dataset> {
        if self.is_standardized() {
            return Err(Error::Contract("dataset is already standardized".into()));
        }
        if st.mean.len() != self.schema.n_continuous() {
            return Err(Error::Shape("standardizer width does not match schema".into()));
        }
        let mut out = self.clone();
        for r in out.rows.iter_mut() {
            r.continuous = st.standardize_row(&r.continuous);
        }
        out.standardizer = Some(st.clone());
        Ok(out)
    }

    /// Raw-unit copy of a standardized dataset.
    pub fn destandardize(&self) -> Dataset {
        let mut out = self.clone();
        if let Some(st) = out.standardizer.take() {
            for r in out.rows.iter_mut() {
                r.continuous = st.destandardize_row(&r.continuous);
            }
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = self.clone();
        out.rows = indices.iter().map(|&i| self.rows[i].clone()).collect();
        out.labels = indices.iter().map(|&i| self.labels[i]).collect();
        out
    }

    /// Copy with labels replaced (e.g. by classifier predictions).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset> {
        if labels.len() != self.len() {
            return Err(Error::Shape("label count mismatch".into()));
        }
        let mut out = self.clone();
        out.labels = labels;
        Ok(out)
    }

    /// Training-set median absolute deviation per continuous feature, in raw
    /// units, falling back to the population std where the MAD is zero.
    pub fn mad(&self) -> Vec<f64> {
        let raw = self.destandardize();
        (0..self.schema.n_continuous())
            .map(|j| {
                let col: Vec<f64> = raw.rows.iter().map(|r| r.continuous[j]).collect();
                let med = median(&col);
                let dev: Vec<f64> = col.iter().map(|v| (v - med).abs()).collect();
                let mad = median(&dev);
                if mad > 0.0 {
                    mad
                } else {
                    let n = col.len().max(1) as f64;
                    let mean = col.iter().sum::<f64>() / n;
                    let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    if std > 0.0 {
                        std
                    } else {
                        1.0
                    }
                }
            })
            .collect()
    }
}

pub(crate) fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Seeded disjoint split into (train, test) index lists, each in ascending order.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Contract(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_from_seed(seed));
    let mut test = perm[..n_test].to_vec();
    let mut train = perm[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = split_indices(dataset.len(), test_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
