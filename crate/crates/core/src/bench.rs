//! Benchmark harness comparing counterfactual methods on the same instances.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{growing_spheres, random_perturbation, GrowingSpheresConfig, RandomConfig};
use crate::cegen::{default_alpha_grid, AlphaMode, CeFlow, ClassMeans, CounterfactualResult};
use crate::classifier::Classifier;
use crate::data::{Dataset, Instance};
use crate::dequant::Dequantizer;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentGmm};
use crate::metrics::{l1_stats, log_density_metric, mean_var, proximity_cat, proximity_con, success_rate, MetricsReport};
use crate::persist::write_atomic;
use crate::rng::derive_seed;

pub const REPORT_COLUMNS: [&str; 9] = [
    "method",
    "success",
    "l1_mean",
    "l1_var",
    "log_density",
    "prox_cat",
    "prox_con",
    "time_mean_s",
    "time_std_s",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    CeFlow,
    GrowingSpheres,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::CeFlow => "ceflow",
            Method::GrowingSpheres => "growing-spheres",
            Method::Random => "random",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ceflow" => Ok(Method::CeFlow),
            "growing-spheres" | "gs" => Ok(Method::GrowingSpheres),
            "random" => Ok(Method::Random),
            _ => Err(format!("unknown method '{s}' (ceflow, growing-spheres, random)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    /// Evaluation instances taken from the front of the dataset.
    pub n_instances: usize,
    pub repetitions: usize,
    pub alpha: AlphaMode,
    pub signed_delta: bool,
    pub growing_spheres: GrowingSpheresConfig,
    pub random: RandomConfig,
    /// Fixed-alpha values for the success curve.
    pub sweep_grid: Vec<f64>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::CeFlow, Method::GrowingSpheres],
            n_instances: 200,
            repetitions: 10,
            alpha: AlphaMode::Search(default_alpha_grid(2.0)),
            signed_delta: true,
            growing_spheres: GrowingSpheresConfig::default(),
            random: RandomConfig::default(),
            sweep_grid: default_alpha_grid(2.0),
            seed: 0,
        }
    }
}

/// Trained artifacts the benchmark reads.
#[derive(Debug, Clone, Copy)]
pub struct Artifacts<'a> {
    pub flow: &'a FlowModel,
    pub dequantizer: &'a Dequantizer,
    pub gmm: &'a LatentGmm,
    pub means: &'a ClassMeans,
    pub classifier: &'a Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaPoint {
    pub alpha: f64,
    pub success: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutput {
    pub reports: Vec<MetricsReport>,
    pub alpha_sweep: Vec<AlphaPoint>,
    /// First-repetition results per method, in `reports` order.
    pub results: Vec<Vec<CounterfactualResult>>,
}

/// Targets the next class: `(y + 1) mod C`.
pub fn next_class(y: usize, classes: usize) -> usize {
    (y + 1) % classes
}

/// Runs one method over `rows` with per-instance seeds.
pub fn run_method(
    method: Method,
    artifacts: &Artifacts,
    config: &BenchConfig,
    rows: &[Instance],
    targets: &[usize],
    seed: u64,
) -> Result<Vec<CounterfactualResult>> {
    let ce = CeFlow::new(artifacts.flow, artifacts.dequantizer, artifacts.means, artifacts.classifier)
        .with_signed(config.signed_delta);
    rows.iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (x, &y))| {
            let s = derive_seed(seed, i as u64);
            match method {
                Method::CeFlow => ce.explain(x, y, &config.alpha, s),
                Method::GrowingSpheres => growing_spheres(artifacts.classifier, x, y, &config.growing_spheres, s),
                Method::Random => random_perturbation(artifacts.classifier, x, y, &config.random, s),
            }
        })
        .collect()
}

/// Metrics of one run; `raw_rows` are the originals in raw units.
pub fn evaluate_results(
    method: &str,
    artifacts: &Artifacts,
    rows: &[Instance],
    raw_rows: &[Instance],
    results: &[CounterfactualResult],
    mad: &[f64],
    seed: u64,
) -> Result<MetricsReport> {
    if results.is_empty() || results.len() != rows.len() || raw_rows.len() != rows.len() {
        return Err(Error::Shape("need one result per evaluation row".into()));
    }
    let cfs: Vec<Instance> = results.iter().map(|r| r.instance()).collect();
    let std_pairs: Vec<(Instance, Instance)> = rows.iter().cloned().zip(cfs.iter().cloned()).collect();
    let raw_pairs: Vec<(Instance, Instance)> = raw_rows
        .iter()
        .cloned()
        .zip(results.iter().map(|r| Instance::new(r.continuous_raw.clone(), r.categorical.clone())))
        .collect();
    let (l1_mean, l1_var) = l1_stats(&std_pairs)?;
    let times: Vec<f64> = results.iter().map(|r| r.wall_time_s).collect();
    let (time_mean_s, time_var) = mean_var(&times);
    Ok(MetricsReport {
        method: method.to_string(),
        success: success_rate(&results.iter().map(|r| r.success).collect::<Vec<_>>())?,
        l1_mean,
        l1_var,
        log_density: log_density_metric(
            artifacts.flow,
            artifacts.dequantizer,
            artifacts.gmm,
            &artifacts.classifier.schema,
            &cfs,
            seed,
        )?,
        prox_cat: proximity_cat(&std_pairs)?,
        prox_con: proximity_con(&raw_pairs, mad)?,
        time_mean_s,
        time_std_s: time_var.sqrt(),
        n: results.len(),
    })
}

fn average(reports: &[MetricsReport], times: &[f64]) -> MetricsReport {
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
    let avg_opt = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
        reports
            .iter()
            .map(f)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let (time_mean_s, time_var) = mean_var(times);
    MetricsReport {
        method: reports[0].method.clone(),
        success: avg(&|r| r.success),
        l1_mean: avg(&|r| r.l1_mean),
        l1_var: avg(&|r| r.l1_var),
        log_density: avg(&|r| r.log_density),
        prox_cat: avg_opt(&|r| r.prox_cat),
        prox_con: avg_opt(&|r| r.prox_con),
        time_mean_s,
        time_std_s: time_var.sqrt(),
        n: reports[0].n,
    }
}

/// Runs every configured method `repetitions` times over the first
/// `n_instances` rows of a standardized `dataset`, targeting the class after
/// each row's prediction. Metrics are averaged over repetitions; wall times
/// are pooled over all calls. `mad` is the training-set MAD in raw units.
pub fn benchmark(dataset: &Dataset, mad: &[f64], artifacts: &Artifacts, config: &BenchConfig) -> Result<BenchOutput> {
    if !dataset.is_standardized() {
        return Err(Error::Contract("benchmark expects a standardized dataset".into()));
    }
    if !dataset.schema.same_layout(&artifacts.classifier.schema) {
        return Err(Error::Schema("dataset layout differs from the model's".into()));
    }
    if config.repetitions == 0 || config.methods.is_empty() {
        return Err(Error::Contract("benchmark needs at least one method and repetition".into()));
    }
    let n = config.n_instances.min(dataset.len());
    if n == 0 {
        return Err(Error::Contract("benchmark needs at least one instance".into()));
    }
    let eval = dataset.subset(&(0..n).collect::<Vec<_>>());
    let raw = eval.destandardize();
    let classes = dataset.schema.classes;
    let targets: Vec<usize> = artifacts
        .classifier
        .predict_dataset(&eval)?
        .into_iter()
        .map(|y| next_class(y, classes))
        .collect();

    let mut reports = Vec::new();
    let mut first_results = Vec::new();
    for &method in &config.methods {
        let mut per_rep = Vec::with_capacity(config.repetitions);
        let mut times = Vec::new();
        for rep in 0..config.repetitions {
            let seed = derive_seed(config.seed, rep as u64);
            let results = run_method(method, artifacts, config, &eval.rows, &targets, seed)?;
            per_rep.push(evaluate_results(method.name(), artifacts, &eval.rows, &raw.rows, &results, mad, seed)?);
            times.extend(results.iter().map(|r| r.wall_time_s));
            if rep == 0 {
                first_results.push(results);
            }
        }
        reports.push(average(&per_rep, &times));
    }

    let ce = CeFlow::new(artifacts.flow, artifacts.dequantizer, artifacts.means, artifacts.classifier)
        .with_signed(config.signed_delta);
    let alpha_sweep = alpha_sweep(&ce, &eval.rows, &targets, &config.sweep_grid, derive_seed(config.seed, 0))?;
    Ok(BenchOutput {
        reports,
        alpha_sweep,
        results: first_results,
    })
}

/// Success rate at each fixed alpha.
pub fn alpha_sweep(ce: &CeFlow, rows: &[Instance], targets: &[usize], grid: &[f64], seed: u64) -> Result<Vec<AlphaPoint>> {
    grid.iter()
        .map(|&alpha| {
            let out = ce.explain_batch(rows, targets, &AlphaMode::Fixed(alpha), seed)?;
            Ok(AlphaPoint {
                alpha,
                success: success_rate(&out.iter().map(|r| r.success).collect::<Vec<_>>())?,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn report_csv(reports: &[MetricsReport]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(REPORT_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.success.to_string(),
            r.l1_mean.to_string(),
            r.l1_var.to_string(),
            r.log_density.to_string(),
            opt(r.prox_cat),
            opt(r.prox_con),
            r.time_mean_s.to_string(),
            r.time_std_s.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Malformed(e.to_string()))
}

pub fn report_markdown(reports: &[MetricsReport]) -> String {
    let mut s = String::new();
    let n = reports.first().map_or(0, |r| r.n);
    let _ = writeln!(s, "# Counterfactual benchmark\n\nInstances per method: {n}. Times are per sample.\n");
    let _ = writeln!(s, "| {} |", REPORT_COLUMNS.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(REPORT_COLUMNS.len()));
    let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    for r in reports {
        let _ = writeln!(
            s,
            "| {} | {:.2} | {:.4} | {:.3e} | {:.4} | {} | {} | {:.3e} | {:.3e} |",
            r.method,
            r.success,
            r.l1_mean,
            r.l1_var,
            r.log_density,
            f(r.prox_cat),
            f(r.prox_con),
            r.time_mean_s,
            r.time_std_s
        );
    }
    s
}

pub fn alpha_sweep_csv(points: &[AlphaPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["alpha", "success"])?;
    for p in points {
        w.write_record([p.alpha.to_string(), p.success.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Malformed(e.to_string()))
}

/// Writes `report.csv`, `report.md` and `alpha_sweep.csv` into `dir`.
pub fn write_outputs(dir: &Path, output: &BenchOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_atomic(&dir.join("report.csv"), &report_csv(&output.reports)?)?;
    write_atomic(&dir.join("report.md"), report_markdown(&output.reports).as_bytes())?;
    write_atomic(&dir.join("alpha_sweep.csv"), &alpha_sweep_csv(&output.alpha_sweep)?)?;
    Ok(())
}
