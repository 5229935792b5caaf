use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use ceflow_core::baselines::GrowingSpheresConfig;
use ceflow_core::bench::{benchmark, evaluate_results, next_class, write_outputs, Artifacts, BenchConfig};
use ceflow_core::cegen::{compute_class_means, default_alpha_grid, CeFlow, CounterfactualResult};
use ceflow_core::classifier::{latent_predict, train_classifier, ClassifierConfig};
use ceflow_core::data::{load_csv, synth_generate, write_csv, Dataset, FeatureSchema, SynthSpec};
use ceflow_core::persist::{load_bundle, save_bundle, write_atomic, ModelBundle};
use ceflow_core::rng::derive_seed;
use ceflow_core::trainer::{train, TrainConfig};

use crate::{BenchArgs, Command, EvaluateArgs, GenerateArgs, MeansArgs, SynthArgs, TrainClfArgs, TrainFlowArgs};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::TrainClf(a) => train_clf(a),
        Command::TrainFlow(a) => train_flow(a),
        Command::Means(a) => means(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Bench(a) => bench(a),
    }
}

fn load(path: &Path) -> Result<ModelBundle> {
    load_bundle(path).with_context(|| format!("loading model bundle {}", path.display()))
}

/// Reads `path` with the bundle's schema and standardizes it with the
/// classifier's statistics.
fn load_standardized(bundle: &ModelBundle, path: &Path) -> Result<Dataset> {
    let clf = bundle.require_classifier()?;
    let ds = load_csv(path, &bundle.schema).with_context(|| format!("reading {}", path.display()))?;
    if ds.dropped_rows > 0 {
        eprintln!("note: dropped {} unusable rows from {}", ds.dropped_rows, path.display());
    }
    Ok(ds.standardize_with(&clf.standardizer)?)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec::new(a.continuous, a.categorical, a.cardinality, a.classes, a.separation);
    let ds = synth_generate(a.common.seed, a.n, &spec)?;
    write_csv(&ds, &a.out)?;
    spec.schema()?.to_json_file(&a.schema_out)?;
    if let Some(test_out) = &a.test_out {
        write_csv(&synth_generate(derive_seed(a.common.seed, 1), a.test_n, &spec)?, test_out)?;
    }
    println!("wrote {} rows to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_clf(a: TrainClfArgs) -> Result<()> {
    let schema = FeatureSchema::from_json_file(&a.schema)?;
    let raw = load_csv(&a.data, &schema).with_context(|| format!("reading {}", a.data.display()))?;
    let (mut ds, _) = raw.standardize()?;
    // pin the value-to-code mapping seen here so later files decode identically
    let mut pinned = schema.clone();
    for (f, values) in pinned.categorical.iter_mut().zip(&ds.category_values) {
        f.values = Some(values.clone());
    }
    ds.schema = pinned.clone();
    let config = ClassifierConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        hidden: a.hidden,
        seed: a.common.seed,
        ..ClassifierConfig::default()
    };
    let (clf, report) = train_classifier(&ds, &config)?;
    let mut bundle = ModelBundle::new(pinned);
    bundle.mad = Some(ds.mad());
    bundle.seeds.insert("classifier".into(), a.common.seed);
    bundle.classifier = Some(clf);
    if let Some(acc) = report.heldout_accuracy {
        println!("classifier held-out accuracy: {acc:.4}");
    }
    bundle.classifier_report = Some(report);
    save_bundle(&bundle, &a.model)?;
    Ok(())
}

fn train_flow(a: TrainFlowArgs) -> Result<()> {
    let mut bundle = load(&a.model)?;
    let ds = load_standardized(&bundle, &a.data)?;
    let predicted = bundle.require_classifier()?.predict_dataset(&ds)?;
    let ds = ds.with_labels(predicted)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.common.seed,
        clip_norm: a.clip_norm,
        scale_clamp: a.scale_clamp,
        layers: a.layers,
        hidden: a.hidden,
        k_mc: a.k_mc,
        mean_scale: a.mean_scale,
        empirical_prior: a.empirical_prior,
        ..TrainConfig::default()
    };
    let trained = train(&ds, &config)?;
    write_json(&sibling(&a.model, "train_report.json"), &trained.report)?;
    if let (Some(first), Some(last)) = (trained.report.first_nll(), trained.report.final_nll()) {
        println!("train NLL: epoch 1 {first:.4}, final {last:.4}");
    }
    bundle.set_flow(trained);
    save_bundle(&bundle, &a.model)?;
    Ok(())
}

fn means(a: MeansArgs) -> Result<()> {
    let mut bundle = load(&a.model)?;
    let ds = load_standardized(&bundle, &a.data)?;
    let (flow, deq, _) = bundle.require_flow()?;
    let cm = compute_class_means(flow, deq, bundle.require_classifier()?, &ds, a.common.seed)?;
    println!("class sizes: {:?}", cm.counts);
    bundle.class_means = Some(cm);
    bundle.seeds.insert("means".into(), a.common.seed);
    save_bundle(&bundle, &a.model)?;
    Ok(())
}

fn explainer<'a>(bundle: &'a ModelBundle, signed: bool) -> Result<CeFlow<'a>> {
    let (flow, deq, _) = bundle.require_flow()?;
    Ok(CeFlow::new(flow, deq, bundle.require_means()?, bundle.require_classifier()?).with_signed(signed))
}

fn limited(ds: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let bundle = load(&a.model)?;
    let ds = limited(load_standardized(&bundle, &a.data)?, a.limit);
    let ce = explainer(&bundle, a.explain.signed_delta)?;
    let clf = ce.classifier;
    let classes = bundle.schema.classes;
    let fixed_target = match a.target.as_str() {
        "next" => None,
        t => {
            let k: usize = t.parse().with_context(|| format!("--target must be `next` or a class index, got `{t}`"))?;
            if k >= classes {
                bail!("--target {k} out of range for {classes} classes");
            }
            Some(k)
        }
    };

    let mut results = Vec::with_capacity(ds.len());
    for (i, x) in ds.rows.iter().enumerate() {
        let y_org = clf.predict(x)?;
        let y_cf = fixed_target.unwrap_or_else(|| next_class(y_org, classes));
        let r = if y_org == y_cf {
            // already in the target class: the instance explains itself
            CounterfactualResult {
                y_org,
                y_cf,
                continuous: x.continuous.clone(),
                continuous_raw: clf.standardizer.destandardize_row(&x.continuous),
                categorical: x.categorical.clone(),
                alpha: Some(0.0),
                success: true,
                latent_shift: Some(0.0),
                wall_time_s: 0.0,
            }
        } else {
            ce.explain(x, y_cf, &a.explain.alpha, derive_seed(a.common.seed, i as u64))?
        };
        results.push(r);
    }

    let raw = ds.destandardize();
    let schema = &bundle.schema;
    let value = |m: usize, code: usize| ds.category_values[m].get(code).cloned().unwrap_or_else(|| code.to_string());
    let mut w = csv::Writer::from_writer(vec![]);
    let mut header = vec!["row".to_string(), "y_org".into(), "y_cf".into()];
    let names: Vec<&String> = schema.continuous.iter().chain(schema.categorical.iter().map(|c| &c.name)).collect();
    header.extend(names.iter().map(|n| n.to_string()));
    header.extend(names.iter().map(|n| format!("cf_{n}")));
    header.extend(["alpha", "success", "latent_shift"].map(String::from));
    w.write_record(&header)?;
    let mut timing = csv::Writer::from_writer(vec![]);
    timing.write_record(["row", "wall_time_micros"])?;
    for (i, (r, x)) in results.iter().zip(&raw.rows).enumerate() {
        let mut rec = vec![i.to_string(), r.y_org.to_string(), r.y_cf.to_string()];
        rec.extend(x.continuous.iter().map(|v| v.to_string()));
        rec.extend(x.categorical.iter().enumerate().map(|(m, &c)| value(m, c)));
        rec.extend(r.continuous_raw.iter().map(|v| v.to_string()));
        rec.extend(r.categorical.iter().enumerate().map(|(m, &c)| value(m, c)));
        rec.push(r.alpha.map_or_else(String::new, |v| v.to_string()));
        rec.push(r.success.to_string());
        rec.push(r.latent_shift.map_or_else(String::new, |v| v.to_string()));
        w.write_record(&rec)?;
        timing.write_record([i.to_string(), format!("{:.3}", r.wall_time_s * 1e6)])?;
    }
    write_atomic(&a.out, &w.into_inner()?)?;
    write_atomic(&sibling(&a.out, "timing.csv"), &timing.into_inner()?)?;
    let ok = results.iter().filter(|r| r.success).count();
    println!("{ok}/{} counterfactuals reached their target class", results.len());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let bundle = load(&a.model)?;
    if let Some(path) = &a.schema {
        let given = FeatureSchema::from_json_file(path)?;
        if !given.same_layout(&bundle.schema) || given.target != bundle.schema.target {
            bail!("schema {} does not match the model's schema", path.display());
        }
    }
    let ds = limited(load_standardized(&bundle, &a.data)?, a.limit);
    let ce = explainer(&bundle, a.explain.signed_delta)?;
    let (flow, deq, gmm) = bundle.require_flow()?;
    let clf = ce.classifier;
    let seed = a.common.seed;

    let predicted = clf.predict_dataset(&ds)?;
    let latent = ds
        .rows
        .iter()
        .enumerate()
        .map(|(i, x)| latent_predict(flow, deq, &bundle.schema, &ce.means.means, x, derive_seed(seed, i as u64)))
        .collect::<ceflow_core::Result<Vec<_>>>()?;
    let frac = |f: &dyn Fn(usize) -> bool| (0..ds.len()).filter(|&i| f(i)).count() as f64 / ds.len() as f64;

    let targets: Vec<usize> = predicted.iter().map(|&y| next_class(y, bundle.schema.classes)).collect();
    let results = ds
        .rows
        .iter()
        .zip(&targets)
        .enumerate()
        .map(|(i, (x, &y))| ce.explain(x, y, &a.explain.alpha, derive_seed(seed, i as u64)))
        .collect::<ceflow_core::Result<Vec<_>>>()?;
    let artifacts = Artifacts { flow, dequantizer: deq, gmm, means: ce.means, classifier: clf };
    let mad = bundle.mad.clone().unwrap_or_else(|| ds.mad());
    let metrics = evaluate_results("ceflow", &artifacts, &ds.rows, &ds.destandardize().rows, &results, &mad, seed)?;

    let out = json!({
        "seed": seed,
        "model_seeds": bundle.seeds,
        "n": ds.len(),
        "classifier_accuracy": frac(&|i| predicted[i] == ds.labels[i]),
        "latent_accuracy": frac(&|i| latent[i] == ds.labels[i]),
        "latent_agreement": frac(&|i| latent[i] == predicted[i]),
        "counterfactuals": metrics,
    });
    match &a.out {
        Some(p) => write_json(p, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let bundle = load(&a.model)?;
    let ds = load_standardized(&bundle, &a.data)?;
    let ce = explainer(&bundle, a.explain.signed_delta)?;
    let (flow, deq, gmm) = bundle.require_flow()?;
    let artifacts = Artifacts { flow, dequantizer: deq, gmm, means: ce.means, classifier: ce.classifier };
    let config = BenchConfig {
        methods: a.methods,
        n_instances: a.n,
        repetitions: a.reps,
        alpha: a.explain.alpha,
        signed_delta: a.explain.signed_delta,
        growing_spheres: GrowingSpheresConfig {
            step: a.gs_step,
            samples: a.gs_samples,
            max_radius: a.gs_max_radius,
            ..GrowingSpheresConfig::default()
        },
        sweep_grid: default_alpha_grid(a.sweep_max),
        seed: a.common.seed,
        ..BenchConfig::default()
    };
    let mad = bundle.mad.clone().unwrap_or_else(|| ds.mad());
    let output = benchmark(&ds, &mad, &artifacts, &config)?;
    write_outputs(&a.out_dir, &output)?;
    print!("{}", ceflow_core::bench::report_markdown(&output.reports));
    Ok(())
}
