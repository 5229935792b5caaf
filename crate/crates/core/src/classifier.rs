//! The black-box classifier being explained, and the latent nearest-mean
//! rule used by the flow.
//!
//! The classifier sees standardized continuous features followed by the
//! one-hot encoding of each categorical feature.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Activation, Adam, DenseNet, Matrix, Parameterized, Tape};
use crate::data::{split_indices, Dataset, FeatureSchema, Instance, Standardizer};
use crate::dequant::{merge, Dequantizer};
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::rng::{derive_seed, stream_rng};

const STREAM_INIT: u64 = 1;
const STREAM_HOLDOUT: u64 = 2;
const STREAM_EPOCH: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub clip_norm: f64,
    pub holdout_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            hidden: vec![64, 64],
            seed: 0,
            clip_norm: 10.0,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub seed: u64,
    pub config: ClassifierConfig,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
    /// `None` when the held-out split is empty.
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub schema: FeatureSchema,
    /// Maps raw continuous values to the units the network was trained on.
    pub standardizer: Standardizer,
    pub net: DenseNet,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `[continuous, one-hot(cat_0), one-hot(cat_1), ...]`.
pub fn encode(schema: &FeatureSchema, continuous: &[f64], categorical: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(schema.n_continuous() + schema.one_hot_width());
    out.extend_from_slice(continuous);
    for (f, &c) in schema.categorical.iter().zip(categorical) {
        let start = out.len();
        out.resize(start + f.cardinality, 0.0);
        out[start + c] = 1.0;
    }
    out
}

impl Classifier {
    pub fn new(schema: FeatureSchema, standardizer: Standardizer, net: DenseNet) -> Result<Self> {
        let input = schema.n_continuous() + schema.one_hot_width();
        if net.in_dim() != input || net.out_dim() != schema.classes {
            return Err(Error::Shape(format!(
                "classifier net must map {input} -> {}, got {} -> {}",
                schema.classes,
                net.in_dim(),
                net.out_dim()
            )));
        }
        if standardizer.mean.len() != schema.n_continuous() {
            return Err(Error::Shape("standardizer does not match the schema".into()));
        }
        Ok(Self { schema, standardizer, net })
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn logits(&self, x: &Instance) -> Result<Vec<f64>> {
        x.check(&self.schema)?;
        self.net.forward(&encode(&self.schema, &x.continuous, &x.categorical))
    }

    /// Predicted class of a standardized instance.
    pub fn predict(&self, x: &Instance) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Prediction for a row already in the encoded (continuous + one-hot) space.
    pub fn predict_encoded(&self, encoded: &[f64]) -> Result<usize> {
        Ok(argmax(&self.net.forward(encoded)?))
    }

    /// Predictions for encoded rows, one per matrix row.
    pub fn predict_encoded_batch(&self, encoded: &Matrix) -> Result<Vec<usize>> {
        let logits = self.net.forward_batch(encoded)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        if !dataset.schema.same_layout(&self.schema) {
            return Err(Error::Schema("dataset layout differs from the classifier's".into()));
        }
        dataset.rows.iter().map(|r| self.predict(r)).collect()
    }

    /// Fraction of rows whose prediction matches the dataset label.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        if dataset.is_empty() {
            return Ok(f64::NAN);
        }
        let pred = self.predict_dataset(dataset)?;
        let hits = pred.iter().zip(&dataset.labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / dataset.len() as f64)
    }
}

impl Parameterized for Classifier {
    fn params(&self) -> Vec<(String, &Matrix)> {
        self.net.params("classifier")
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        self.net.params_mut("classifier")
    }
}

/// Cross-entropy training on a standardized dataset.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierConfig) -> Result<(Classifier, ClassifierReport)> {
    let standardizer = dataset
        .standardizer
        .clone()
        .ok_or_else(|| Error::Contract("classifier training expects a standardized dataset".into()))?;
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || config.hidden.contains(&0) {
        return Err(Error::Contract("classifier config: sizes and learning rate must be positive".into()));
    }
    let schema = &dataset.schema;
    let mut present = vec![false; schema.classes];
    dataset.labels.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Contract("classifier training needs at least two classes present".into()));
    }

    let seed = config.seed;
    let (train_idx, held_idx) = split_indices(dataset.len(), config.holdout_fraction, derive_seed(seed, STREAM_HOLDOUT))?;
    let train_set = dataset.subset(&train_idx);
    let held_set = dataset.subset(&held_idx);

    let mut widths = vec![schema.n_continuous() + schema.one_hot_width()];
    widths.extend_from_slice(&config.hidden);
    widths.push(schema.classes);
    let net = DenseNet::new(&widths, Activation::Relu, Activation::Identity, &mut stream_rng(seed, STREAM_INIT));
    let mut clf = Classifier::new(schema.clone(), standardizer, net)?;

    let encoded: Vec<Vec<f64>> = train_set
        .rows
        .iter()
        .map(|r| encode(schema, &r.continuous, &r.categorical))
        .collect();
    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream_rng(seed, STREAM_EPOCH + epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = Matrix::from_rows(&chunk.iter().map(|&i| &encoded[i][..]).collect::<Vec<_>>());
            let y: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut tape = Tape::new();
            let params = clf.register(&mut tape);
            let input = tape.leaf(x);
            let logits = clf.net.forward_tape(&mut tape, input, &params);
            let loss = tape.softmax_cross_entropy(logits, &y);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::training(
                    format!("classifier epoch {}, batch {b}", epoch + 1),
                    format!("loss is {value}"),
                ));
            }
            let g = tape.backward(loss)?;
            let mut grads: Vec<Matrix> = params.iter().map(|&p| g.wrt(p)).collect();
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(clf.params_mut(), &grads)?;
            sum += value;
            batches += 1;
        }
        epoch_losses.push(sum / batches.max(1) as f64);
    }
    let heldout_accuracy = if held_set.is_empty() { None } else { Some(clf.accuracy(&held_set)?) };
    Ok((
        clf,
        ClassifierReport {
            seed,
            config: config.clone(),
            epoch_losses,
            heldout_accuracy,
        },
    ))
}

/// Index of the nearest mean; ties go to the smallest index.
pub fn nearest_mean(z: &[f64], means: &[Vec<f64>]) -> usize {
    let dist: Vec<f64> = means
        .iter()
        .map(|m| -m.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    argmax(&dist)
}

/// Latent-space class decision: the class whose mean is closest to `f(x)`,
/// with categorical noise drawn once from `seed`.
pub fn latent_predict(
    flow: &FlowModel,
    deq: &Dequantizer,
    schema: &FeatureSchema,
    means: &[Vec<f64>],
    x: &Instance,
    seed: u64,
) -> Result<usize> {
    x.check(schema)?;
    let d = deq.dequantize(&x.categorical, seed)?;
    let (z, _) = flow.forward(&merge(schema, &d.z, &x.continuous)?)?;
    Ok(nearest_mean(&z, means))
}
