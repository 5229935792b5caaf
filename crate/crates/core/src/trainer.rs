//! Joint maximum-likelihood training of the flow and the dequantizer under a
//! frozen class-conditional Gaussian mixture.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, Adam, Matrix, Parameterized, Tape, Var};
use crate::data::{split_indices, Dataset, FeatureSchema, Instance};
use crate::dequant::{merge, Dequantizer};
use crate::error::{Error, Result};
use crate::flow::{
    default_hidden_width, gaussian_log_density, FlowModel, LatentGmm, DEFAULT_LAYERS, DEFAULT_SCALE_CLAMP,
};
use crate::rng::{derive_seed, rng_from_seed, stream_rng, Rng};

/// Training NLL above this is treated as divergence.
pub const DIVERGENCE_NLL: f64 = 1e6;

// Seed streams.
const STREAM_FLOW_INIT: u64 = 1;
const STREAM_DEQ_INIT: u64 = 2;
const STREAM_GMM: u64 = 3;
const STREAM_HOLDOUT: u64 = 4;
const STREAM_EPOCH: u64 = 1 << 32;
const STREAM_EVAL: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub scale_clamp: f64,
    pub layers: usize,
    /// Coupling-net hidden widths; empty means two layers of
    /// [`default_hidden_width`].
    pub hidden: Vec<usize>,
    pub dequant_hidden: Vec<usize>,
    /// Dequantization draws per row per step.
    pub k_mc: usize,
    /// Draws per row when scoring the held-out split.
    pub k_mc_eval: usize,
    /// Standard deviation of the random mixture means.
    pub mean_scale: f64,
    pub holdout_fraction: f64,
    /// Mixture weights from class frequencies instead of `1/C`.
    pub empirical_prior: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            clip_norm: 10.0,
            scale_clamp: DEFAULT_SCALE_CLAMP,
            layers: DEFAULT_LAYERS,
            hidden: vec![],
            dequant_hidden: vec![64],
            k_mc: 1,
            k_mc_eval: 8,
            mean_scale: 1.0,
            holdout_fraction: 0.1,
            empirical_prior: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(format!("train config: {what}")));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) || !(self.scale_clamp > 0.0) {
            return bad("learning rate, clip norm and scale clamp must be positive");
        }
        if self.k_mc == 0 || self.k_mc_eval == 0 {
            return bad("Monte-Carlo sample counts must be positive");
        }
        if self.hidden.contains(&0) || self.dequant_hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !(self.mean_scale >= 0.0) {
            return bad("mean scale must be non-negative");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout fraction must be in [0, 1)");
        }
        Ok(())
    }

    pub fn hidden_for(&self, dim: usize) -> Vec<usize> {
        if self.hidden.is_empty() {
            vec![default_hidden_width(dim); 2]
        } else {
            self.hidden.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the batch losses, nats per instance.
    pub nll: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochStats>,
    /// `None` when the held-out split is empty.
    pub heldout_nll: Option<f64>,
    pub n_train: usize,
    pub n_heldout: usize,
}

impl TrainReport {
    pub fn first_nll(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.nll)
    }

    pub fn final_nll(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.nll)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedFlow {
    pub flow: FlowModel,
    pub dequantizer: Dequantizer,
    pub gmm: LatentGmm,
    pub report: TrainReport,
}

/// Random frozen mixture means `mu_k ~ scale * N(0, I_D)`.
pub fn init_gmm(classes: usize, dim: usize, seed: u64, scale: f64) -> Result<LatentGmm> {
    if classes < 2 || dim == 0 {
        return Err(Error::Contract(format!(
            "mixture needs C >= 2 and D >= 1, got C = {classes}, D = {dim}"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let means = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    scale * e
                })
                .collect()
        })
        .collect();
    LatentGmm::new(means)
}

/// Loss graph for one batch, with the registered parameter leaves in
/// flow-then-dequantizer order.
pub struct BatchLoss {
    pub tape: Tape,
    pub loss: Var,
    pub params: Vec<Var>,
}

impl BatchLoss {
    pub fn value(&self) -> f64 {
        self.tape.scalar(self.loss)
    }
}

/// Records `-mean[log N(f(x); mu_y, I) + log|det| - log q(u | x_cat)]` for a
/// batch. `eps` is the standard-normal dequantization noise, one row per
/// batch entry (ignored when there are no categorical features).
pub fn nll_batch_with_noise(
    flow: &FlowModel,
    gmm: &LatentGmm,
    deq: &Dequantizer,
    schema: &FeatureSchema,
    rows: &[&Instance],
    labels: &[usize],
    eps: &Matrix,
    batch_index: usize,
) -> Result<BatchLoss> {
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Shape("batch needs one label per row and at least one row".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= gmm.n_components()) {
        return Err(Error::Contract(format!("label {y} has no mixture component")));
    }
    let d = schema.full_dim();
    if flow.dim != d || gmm.dim() != d {
        return Err(Error::Shape(format!("flow and mixture must have dimension {d}")));
    }
    let mut tape = Tape::new();
    let mut params = flow.register(&mut tape);
    let deq_params = deq.register(&mut tape);
    params.extend_from_slice(&deq_params);

    let con = Matrix::from_rows(&rows.iter().map(|r| r.continuous.clone()).collect::<Vec<_>>());
    let codes: Vec<Vec<usize>> = rows.iter().map(|r| r.categorical.clone()).collect();
    let (x_full, log_q) = match deq.dequantize_tape(&mut tape, &codes, eps, &deq_params) {
        Some((z_cat, log_q)) if schema.n_continuous() > 0 => {
            let con = tape.leaf(con);
            (tape.concat_cols(&[z_cat, con]), Some(log_q))
        }
        Some((z_cat, log_q)) => (z_cat, Some(log_q)),
        None => (tape.leaf(con), None),
    };

    let (z, logdet) = flow.forward_tape(&mut tape, x_full, &params[..params.len() - deq_params.len()]);
    let targets = Matrix::from_rows(&labels.iter().map(|&y| gmm.means[y].iter().map(|m| -m).collect::<Vec<_>>()).collect::<Vec<_>>());
    let diff = tape.add_const(z, targets);
    let sq = tape.square(diff);
    let sq = tape.sum_cols(sq);
    let log_n = tape.scale(sq, -0.5);
    let log_n = tape.shift(log_n, -0.5 * d as f64 * (2.0 * PI).ln());
    let mut per = tape.add(log_n, logdet);
    if let Some(lq) = log_q {
        per = tape.sub(per, lq);
    }
    let mean = tape.mean(per);
    let loss = tape.neg(mean);
    let value = tape.scalar(loss);
    if value.is_nan() {
        return Err(Error::training(format!("batch {batch_index}"), "loss is NaN"));
    }
    Ok(BatchLoss { tape, loss, params })
}

/// [`nll_batch_with_noise`] with noise drawn from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn nll_batch(
    flow: &FlowModel,
    gmm: &LatentGmm,
    deq: &Dequantizer,
    schema: &FeatureSchema,
    rows: &[&Instance],
    labels: &[usize],
    seed: u64,
    batch_index: usize,
) -> Result<BatchLoss> {
    let eps = draw_noise(rows.len(), deq.n_features(), &mut rng_from_seed(seed));
    nll_batch_with_noise(flow, gmm, deq, schema, rows, labels, &eps, batch_index)
}

fn draw_noise(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Monte-Carlo estimate of the per-instance negative bound, averaged over
/// `k_mc` draws per row and over rows.
pub fn mean_nll(
    flow: &FlowModel,
    gmm: &LatentGmm,
    deq: &Dequantizer,
    dataset: &Dataset,
    k_mc: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for (i, (row, &y)) in dataset.rows.iter().zip(&dataset.labels).enumerate() {
        let mut rng = stream_rng(seed, i as u64);
        let mut acc = 0.0;
        for _ in 0..k_mc {
            let d = deq.dequantize_rng(&row.categorical, &mut rng)?;
            let x = merge(&dataset.schema, &d.z, &row.continuous)?;
            let (z, logdet) = flow.forward(&x)?;
            acc += gaussian_log_density(&z, &gmm.means[y]) + logdet - d.log_q;
        }
        total -= acc / k_mc as f64;
    }
    Ok(total / dataset.len() as f64)
}

fn class_frequencies(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&y| counts[y] += 1);
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Setup(format!("class {k} has no training rows for the empirical prior")));
    }
    Ok(counts.iter().map(|&c| c as f64 / labels.len() as f64).collect())
}

/// Trains on `dataset.labels`, which the pipeline sets to the black-box
/// classifier's predictions. The dataset must be standardized.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedFlow> {
    config.validate()?;
    if !dataset.is_standardized() {
        return Err(Error::Contract("training expects a standardized dataset".into()));
    }
    let schema = &dataset.schema;
    let d = schema.full_dim();
    let seed = config.seed;

    let (train_idx, held_idx) = split_indices(dataset.len(), config.holdout_fraction, derive_seed(seed, STREAM_HOLDOUT))?;
    let train_set = dataset.subset(&train_idx);
    let held_set = dataset.subset(&held_idx);
    if train_set.is_empty() {
        return Err(Error::Contract("no training rows".into()));
    }

    let mut flow = FlowModel::new(
        d,
        config.layers,
        &config.hidden_for(d),
        config.scale_clamp,
        &mut stream_rng(seed, STREAM_FLOW_INIT),
    )?;
    let mut deq = Dequantizer::for_schema(schema, &config.dequant_hidden, &mut stream_rng(seed, STREAM_DEQ_INIT));
    let mut gmm = init_gmm(schema.classes, d, derive_seed(seed, STREAM_GMM), config.mean_scale)?;
    if config.empirical_prior {
        gmm = LatentGmm::with_weights(gmm.means, class_frequencies(&train_set.labels, schema.classes)?)?;
    }

    let mut adam = Adam::new(config.learning_rate);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut rng = stream_rng(seed, STREAM_EPOCH + epoch as u64);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rows = Vec::with_capacity(chunk.len() * config.k_mc);
            let mut labels = Vec::with_capacity(chunk.len() * config.k_mc);
            for _ in 0..config.k_mc {
                for &i in chunk {
                    rows.push(&train_set.rows[i]);
                    labels.push(train_set.labels[i]);
                }
            }
            let eps = draw_noise(rows.len(), deq.n_features(), &mut rng);
            let batch = nll_batch_with_noise(&flow, &gmm, &deq, schema, &rows, &labels, &eps, b)
                .map_err(|e| relocate(e, epoch))?;
            let value = batch.value();
            let grads = batch.tape.backward(batch.loss)?;
            let mut grads: Vec<Matrix> = batch.params.iter().map(|&p| grads.wrt(p)).collect();
            clip_global_norm(&mut grads, config.clip_norm);
            let mut params = flow.params_mut();
            params.extend(deq.params_mut());
            adam.step(params, &grads).map_err(|e| relocate(e, epoch))?;
            sum += value;
            n_batches += 1;
        }
        let nll = sum / n_batches as f64;
        if nll.is_nan() || nll > DIVERGENCE_NLL {
            return Err(Error::training(format!("epoch {}", epoch + 1), format!("diverged, NLL = {nll}")));
        }
        epochs.push(EpochStats {
            epoch: epoch + 1,
            nll,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    let heldout_nll = if held_set.is_empty() {
        None
    } else {
        Some(mean_nll(&flow, &gmm, &deq, &held_set, config.k_mc_eval, derive_seed(seed, STREAM_EVAL))?)
    };
    Ok(TrainedFlow {
        flow,
        dequantizer: deq,
        gmm,
        report: TrainReport {
            seed,
            config: config.clone(),
            epochs,
            heldout_nll,
            n_train: train_set.len(),
            n_heldout: held_set.len(),
        },
    })
}

fn relocate(err: Error, epoch: usize) -> Error {
    match err {
        Error::Training { location, message } => Error::Training {
            location: format!("epoch {}, {location}", epoch + 1),
            message,
        },
        other => other,
    }
}
