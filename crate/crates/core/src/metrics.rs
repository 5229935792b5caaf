//! Evaluation metrics for counterfactuals.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::data::{FeatureSchema, Instance};
use crate::dequant::{merge, Dequantizer};
use crate::error::{Error, Result};
use crate::flow::{log_prob_marginal, FlowModel, LatentGmm};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    /// Percent in [0, 100].
    pub success: f64,
    pub l1_mean: f64,
    pub l1_var: f64,
    /// Mean log-density in nats.
    pub log_density: f64,
    /// `None` without categorical features.
    pub prox_cat: Option<f64>,
    /// `None` without continuous features.
    pub prox_con: Option<f64>,
    /// Per-sample wall time in seconds.
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub n: usize,
}

/// Population mean and variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.max(0.0))
}

fn nonempty<T>(items: &[T]) -> Result<()> {
    if items.is_empty() {
        Err(Error::Contract("metrics need at least one instance".into()))
    } else {
        Ok(())
    }
}

fn same_shape(a: &Instance, b: &Instance) -> Result<()> {
    if a.continuous.len() != b.continuous.len() || a.categorical.len() != b.categorical.len() {
        return Err(Error::Schema("original and counterfactual have different layouts".into()));
    }
    Ok(())
}

/// `100 * successes / N`.
pub fn success_rate(flags: &[bool]) -> Result<f64> {
    nonempty(flags)?;
    Ok(100.0 * flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Standardized continuous l1 distance plus the number of changed codes.
pub fn l1_distance(org: &Instance, cf: &Instance) -> Result<f64> {
    same_shape(org, cf)?;
    let con: f64 = org.continuous.iter().zip(&cf.continuous).map(|(a, b)| (a - b).abs()).sum();
    let cat = org.categorical.iter().zip(&cf.categorical).filter(|(a, b)| a != b).count();
    Ok(con + cat as f64)
}

/// Population mean and variance of [`l1_distance`] over `(original, counterfactual)` pairs.
pub fn l1_stats(pairs: &[(Instance, Instance)]) -> Result<(f64, f64)> {
    nonempty(pairs)?;
    let d = pairs.iter().map(|(o, c)| l1_distance(o, c)).collect::<Result<Vec<_>>>()?;
    Ok(mean_var(&d))
}

/// Log-mean-exp over `deq.eval_samples` dequantization draws of the
/// marginal flow log-density of a standardized instance.
pub fn log_density(
    flow: &FlowModel,
    deq: &Dequantizer,
    gmm: &LatentGmm,
    schema: &FeatureSchema,
    x: &Instance,
    seed: u64,
) -> Result<f64> {
    x.check(schema)?;
    let k = if schema.n_categorical() == 0 { 1 } else { deq.eval_samples.max(1) };
    let mut rng = stream_rng(seed, 0);
    let terms = (0..k)
        .map(|_| {
            let d = deq.dequantize_rng(&x.categorical, &mut rng)?;
            log_prob_marginal(flow, gmm, &merge(schema, &d.z, &x.continuous)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(log_sum_exp(&terms) - (k as f64).ln())
}

/// Mean of [`log_density`]; instance `i` uses stream `i` of `seed`.
pub fn log_density_metric(
    flow: &FlowModel,
    deq: &Dequantizer,
    gmm: &LatentGmm,
    schema: &FeatureSchema,
    counterfactuals: &[Instance],
    seed: u64,
) -> Result<f64> {
    nonempty(counterfactuals)?;
    let mut total = 0.0;
    for (i, x) in counterfactuals.iter().enumerate() {
        total += log_density(flow, deq, gmm, schema, x, crate::rng::derive_seed(seed, i as u64))?;
    }
    Ok(total / counterfactuals.len() as f64)
}

/// Mean fraction of unchanged categorical codes; `None` when there are none.
pub fn proximity_cat(pairs: &[(Instance, Instance)]) -> Result<Option<f64>> {
    nonempty(pairs)?;
    let m = pairs[0].0.categorical.len();
    if m == 0 {
        return Ok(None);
    }
    let mut total = 0.0;
    for (o, c) in pairs {
        same_shape(o, c)?;
        let changed = o.categorical.iter().zip(&c.categorical).filter(|(a, b)| a != b).count();
        total += 1.0 - changed as f64 / m as f64;
    }
    Ok(Some(total / pairs.len() as f64))
}

/// Mean of `-(1/J) sum_j |x_cf - x_org| / mad_j` over raw-unit pairs;
/// `None` when there are no continuous features.
pub fn proximity_con(pairs: &[(Instance, Instance)], mad: &[f64]) -> Result<Option<f64>> {
    nonempty(pairs)?;
    let j = pairs[0].0.continuous.len();
    if j == 0 {
        return Ok(None);
    }
    if mad.len() != j || mad.iter().any(|&m| !(m > 0.0)) {
        return Err(Error::Contract("need one positive MAD per continuous feature".into()));
    }
    let mut total = 0.0;
    for (o, c) in pairs {
        same_shape(o, c)?;
        let s: f64 = o
            .continuous
            .iter()
            .zip(&c.continuous)
            .zip(mad)
            .map(|((a, b), m)| (a - b).abs() / m)
            .sum();
        total -= s / j as f64;
    }
    Ok(Some(total / pairs.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use std::f64::consts::PI;

    fn inst(c: &[f64], k: &[usize]) -> Instance {
        Instance::new(c.to_vec(), k.to_vec())
    }

    #[test]
    fn success_counts() {
        assert_eq!(success_rate(&[true; 4]).unwrap(), 100.0);
        let mut f = vec![true; 20];
        f[3] = false;
        assert_eq!(success_rate(&f).unwrap(), 95.0);
        assert!(success_rate(&[]).is_err());
    }

    #[test]
    fn l1_identical_and_population_variance() {
        let a = inst(&[1.0, 2.0], &[0, 1]);
        assert_eq!(l1_stats(&[(a.clone(), a.clone()), (a.clone(), a.clone())]).unwrap(), (0.0, 0.0));
        let p1 = (inst(&[0.0], &[0]), inst(&[1.0], &[0]));
        let p2 = (inst(&[0.0], &[0]), inst(&[2.0], &[1]));
        assert_eq!(l1_stats(&[p1, p2]).unwrap(), (2.0, 1.0));
    }

    #[test]
    fn l1_rejects_layout_mismatch() {
        assert!(matches!(l1_distance(&inst(&[0.0], &[]), &inst(&[0.0, 1.0], &[])), Err(Error::Schema(_))));
    }

    #[test]
    fn proximities() {
        let a = inst(&[1.0], &[0, 1]);
        assert_eq!(proximity_cat(&[(a.clone(), a.clone())]).unwrap(), Some(1.0));
        assert_eq!(proximity_con(&[(a.clone(), a.clone())], &[2.0]).unwrap(), Some(0.0));
        let all = inst(&[1.0], &[1, 0]);
        assert_eq!(proximity_cat(&[(a.clone(), all)]).unwrap(), Some(0.0));
        let moved = inst(&[3.0], &[0, 1]);
        assert_eq!(proximity_con(&[(a, moved)], &[2.0]).unwrap(), Some(-1.0));
        let nocat = inst(&[1.0], &[]);
        assert_eq!(proximity_cat(&[(nocat.clone(), nocat)]).unwrap(), None);
    }

    #[test]
    fn log_density_of_standard_normal_mode() {
        let d = 3;
        let schema = FeatureSchema::new((0..d).map(|j| format!("x{j}")).collect(), vec![], "y", 2).unwrap();
        let gmm = LatentGmm::new(vec![vec![0.0; d]]).unwrap();
        let deq = Dequantizer::new(vec![], &[4], &mut rng_from_seed(0));
        let v = log_density_metric(&FlowModel::identity(d), &deq, &gmm, &schema, &[inst(&[0.0; 3], &[])], 0).unwrap();
        assert!((v + 0.5 * d as f64 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn mode_is_denser_than_uniform_box() {
        use rand::Rng as _;
        let schema = FeatureSchema::new(vec!["a".into(), "b".into()], vec![], "y", 2).unwrap();
        let gmm = LatentGmm::new(vec![vec![-2.0, 0.0], vec![2.0, 0.0]]).unwrap();
        let deq = Dequantizer::new(vec![], &[4], &mut rng_from_seed(0));
        let flow = FlowModel::identity(2);
        let modes = vec![inst(&[-2.0, 0.0], &[]), inst(&[2.0, 0.0], &[])];
        let mut rng = rng_from_seed(1);
        let uniform: Vec<Instance> = (0..100)
            .map(|_| inst(&[rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)], &[]))
            .collect();
        let hi = log_density_metric(&flow, &deq, &gmm, &schema, &modes, 0).unwrap();
        let lo = log_density_metric(&flow, &deq, &gmm, &schema, &uniform, 0).unwrap();
        assert!(hi > lo);
    }
}
