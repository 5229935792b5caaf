//! Acceptance checks on the synthetic benchmark (J=4, M=2, K=3, C=2, s=6,
//! N=2000). Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use ceflow_core::autodiff::{Matrix, Parameterized, Tape, Var};
use ceflow_core::baselines::{growing_spheres, GrowingSpheresConfig};
use ceflow_core::bench::{alpha_sweep, alpha_sweep_csv, benchmark, next_class, Artifacts, BenchConfig, Method};
use ceflow_core::cegen::{compute_class_means, default_alpha_grid, AlphaMode, CeFlow, ClassMeans};
use ceflow_core::classifier::{latent_predict, train_classifier, Classifier, ClassifierConfig};
use ceflow_core::data::{synth_generate, Dataset, Instance, SynthSpec};
use ceflow_core::dequant::merge;
use ceflow_core::flow::FlowModel;
use ceflow_core::metrics::{l1_distance, mean_var};
use ceflow_core::persist::{bundle_from_bytes, bundle_to_bytes, ModelBundle};
use ceflow_core::rng::{derive_seed, rng_from_seed, Rng};
use ceflow_core::trainer::{self, TrainConfig, TrainedFlow};

const SEED: u64 = 7;
const FLOW_EPOCHS: usize = 50;

const ROUND_TRIP_TOL: f64 = 1e-7;
const ROUND_TRIP_BUDGET_S: f64 = 5.0;
const LOGDET_REL_TOL: f64 = 1e-4;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_CASES: usize = 100;
const NLL_RATIO_MAX: f64 = 0.8;
const TRAIN_BUDGET_S: f64 = 600.0;
const CLASSIFIER_ACC_MIN: f64 = 0.95;
const LATENT_ACC_MIN: f64 = 0.90;
const SUCCESS_MIN: f64 = 99.0;
const SEARCH_BUDGET_S: f64 = 30.0;
const SPEED_RATIO_MAX: f64 = 0.5;
const EVAL_N: usize = 200;

struct Fixture {
    train: Dataset,
    test: Dataset,
    mad: Vec<f64>,
    classifier: Classifier,
    trained: TrainedFlow,
    train_seconds: f64,
    means: ClassMeans,
}

impl Fixture {
    fn build() -> Self {
        let spec = SynthSpec::new(4, 2, 3, 2, 6.0);
        let raw_train = synth_generate(SEED, 2000, &spec).unwrap();
        let raw_test = synth_generate(derive_seed(SEED, 1), 500, &spec).unwrap();
        let (train_std, st) = raw_train.standardize().unwrap();
        let test = raw_test.standardize_with(&st).unwrap();
        let (classifier, _) = train_classifier(&train_std, &ClassifierConfig { seed: SEED, ..Default::default() }).unwrap();
        let predicted = classifier.predict_dataset(&train_std).unwrap();
        let train = train_std.with_labels(predicted).unwrap();
        let config = TrainConfig { epochs: FLOW_EPOCHS, seed: SEED, ..Default::default() };
        let start = Instant::now();
        let trained = trainer::train(&train, &config).unwrap();
        let train_seconds = start.elapsed().as_secs_f64();
        let means = compute_class_means(&trained.flow, &trained.dequantizer, &classifier, &train, SEED).unwrap();
        Fixture { mad: raw_train.mad(), train, test, classifier, trained, train_seconds, means }
    }

    fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            flow: &self.trained.flow,
            dequantizer: &self.trained.dequantizer,
            gmm: &self.trained.gmm,
            means: &self.means,
            classifier: &self.classifier,
        }
    }

    fn explainer(&self) -> CeFlow<'_> {
        CeFlow::new(&self.trained.flow, &self.trained.dequantizer, &self.means, &self.classifier)
    }

    fn eval_rows(&self) -> (Vec<Instance>, Vec<usize>) {
        let rows: Vec<Instance> = self.test.rows[..EVAL_N].to_vec();
        let targets = rows
            .iter()
            .map(|x| next_class(self.classifier.predict(x).unwrap(), 2))
            .collect();
        (rows, targets)
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---- criterion 1

fn invertibility(f: &Fixture) -> Outcome {
    let flow = &f.trained.flow;
    let schema = &f.test.schema;
    let inputs: Vec<Vec<f64>> = (0..1000)
        .map(|i| {
            let x = &f.test.rows[i % f.test.len()];
            let d = f.trained.dequantizer.dequantize(&x.categorical, derive_seed(SEED, i as u64)).unwrap();
            merge(schema, &d.z, &x.continuous).unwrap()
        })
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for x in &inputs {
        let (z, _) = flow.forward(x).unwrap();
        let back = flow.inverse(&z).unwrap();
        for (a, b) in x.iter().zip(&back) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < ROUND_TRIP_TOL && secs < ROUND_TRIP_BUDGET_S,
        format!("max abs error {worst:.3e} (< {ROUND_TRIP_TOL:e}), {secs:.3} s (< {ROUND_TRIP_BUDGET_S} s)"),
    )
}

// ---- criterion 2

/// `log |det A|` by LU with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut total = 0.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, pivot);
        let p = a[col][col];
        total += p.abs().ln();
        for r in col + 1..n {
            let factor = a[r][col] / p;
            for c in col..n {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    total
}

fn randomized_flow(dim: usize, rng: &mut Rng) -> FlowModel {
    let mut flow = FlowModel::new(dim, 8, &[32, 32], 2.0, rng).unwrap();
    let normal = Normal::new(0.0, 0.3).unwrap();
    for (_, m) in flow.params_mut() {
        m.data.iter_mut().for_each(|v| *v = normal.sample(rng));
    }
    flow
}

fn logdet_exactness() -> Outcome {
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut rng = rng_from_seed(derive_seed(SEED, 2));
    for dim in [2, 3, 4] {
        let flow = randomized_flow(dim, &mut rng);
        for _ in 0..50 {
            let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (_, analytic) = flow.forward(&x).unwrap();
            // column j of the Jacobian is d f / d x_j
            let mut jac = vec![vec![0.0; dim]; dim];
            for j in 0..dim {
                let mut up = x.clone();
                let mut down = x.clone();
                up[j] += h;
                down[j] -= h;
                let (fu, _) = flow.forward(&up).unwrap();
                let (fd, _) = flow.forward(&down).unwrap();
                for i in 0..dim {
                    jac[i][j] = (fu[i] - fd[i]) / (2.0 * h);
                }
            }
            let numeric = log_abs_det(jac);
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-2));
        }
    }
    outcome(worst < LOGDET_REL_TOL, format!("max relative error {worst:.3e} over D in {{2,3,4}} x 50 (< {LOGDET_REL_TOL:e})"))
}

// ---- criterion 3

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng, draw: &dyn Fn(&mut Rng) -> f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| draw(rng)).collect())
}

/// Scalar probe `sum(build(inputs) * w)` for a fixed random `w`.
fn probe(build: &Build, inputs: &[Matrix], w: &mut Option<Matrix>, rng: &mut Rng) -> (Tape, Var, Vec<Var>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = build(&mut tape, &vars);
    let (r, c) = tape.value(out).shape();
    let weights = w.get_or_insert_with(|| random_matrix(r, c, rng, &|g| g.random_range(0.5..1.5)));
    let weighted = tape.mul_const(out, weights.clone());
    let loss = tape.sum(weighted);
    (tape, loss, vars)
}

/// Largest relative gap between tape and central-difference gradients;
/// the denominator is floored at 1e-3 so near-zero gradients compare absolutely.
fn grad_gap(build: &Build, inputs: Vec<Matrix>, rng: &mut Rng) -> f64 {
    let h = 1e-6;
    let mut w = None;
    let (tape, loss, vars) = probe(build, &inputs, &mut w, rng);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for e in 0..inputs[k].data.len() {
            let eval = |delta: f64, rng: &mut Rng| {
                let mut shifted = inputs.clone();
                shifted[k].data[e] += delta;
                let (t, l, _) = probe(build, &shifted, &mut w.clone(), rng);
                t.scalar(l)
            };
            let numeric = (eval(h, rng) - eval(-h, rng)) / (2.0 * h);
            let a = analytic.data[e];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

/// Input-independent constant for the `*_const` ops.
fn fixed_matrix(rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|i| (i as f64 * 1.3).sin()).collect())
}

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian draws kept at least `gap` away from each kink.
fn away_from(kinks: &'static [f64], gap: f64) -> impl Fn(&mut Rng) -> f64 {
    move |rng| loop {
        let v: f64 = StandardNormal.sample(rng);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            return v;
        }
    }
}

fn gradient_correctness() -> Outcome {
    let mut rng = rng_from_seed(derive_seed(SEED, 3));
    let positive = |rng: &mut Rng| rng.random_range(0.2..3.0);
    let relu_safe = away_from(&[0.0], 0.01);
    let clamp_safe = away_from(&[-0.5, 0.5], 0.01);

    type Case = (&'static str, usize, Box<Build>);
    let unary = |f: fn(&mut Tape, Var) -> Var| -> Box<Build> { Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0])) };
    let binary = |f: fn(&mut Tape, Var, Var) -> Var| -> Box<Build> { Box::new(move |t: &mut Tape, v: &[Var]| f(t, v[0], v[1])) };
    let ops: Vec<Case> = vec![
        ("add", 2, binary(Tape::add)),
        ("sub", 2, binary(Tape::sub)),
        ("mul", 2, binary(Tape::mul)),
        ("neg", 1, unary(Tape::neg)),
        ("relu", 1, unary(Tape::relu)),
        ("tanh", 1, unary(Tape::tanh)),
        ("sigmoid", 1, unary(Tape::sigmoid)),
        ("softplus", 1, unary(Tape::softplus)),
        ("log", 1, unary(Tape::log)),
        ("exp", 1, unary(Tape::exp)),
        ("square", 1, unary(Tape::square)),
        ("sum", 1, unary(Tape::sum)),
        ("mean", 1, unary(Tape::mean)),
        ("sum_cols", 1, unary(Tape::sum_cols)),
        ("scale", 1, Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7))),
        ("shift", 1, Box::new(|t: &mut Tape, v: &[Var]| t.shift(v[0], 0.3))),
        ("clamp", 1, Box::new(|t: &mut Tape, v: &[Var]| t.clamp(v[0], -0.5, 0.5))),
        ("add_const", 1, Box::new(|t: &mut Tape, v: &[Var]| {
            let (r, c) = t.value(v[0]).shape();
            t.add_const(v[0], fixed_matrix(r, c))
        })),
        ("mul_const", 1, Box::new(|t: &mut Tape, v: &[Var]| {
            // row-broadcast constant
            let c = t.value(v[0]).cols;
            t.mul_const(v[0], fixed_matrix(1, c).map(|x| 1.0 + x))
        })),
        ("concat_cols", 2, Box::new(|t: &mut Tape, v: &[Var]| {
            let b = t.square(v[1]);
            t.concat_cols(&[v[0], b, v[0]])
        })),
        ("select_cols", 1, Box::new(|t: &mut Tape, v: &[Var]| {
            let n = t.value(v[0]).cols;
            let cols: Vec<usize> = (0..n + 2).map(|i| (i * 7 + 1) % n).collect();
            t.select_cols(v[0], &cols)
        })),
        ("affine", 3, Box::new(|t: &mut Tape, v: &[Var]| t.affine(v[0], v[1], v[2]))),
        ("softmax_cross_entropy", 1, Box::new(|t: &mut Tape, v: &[Var]| {
            let rows = t.value(v[0]).rows;
            let cols = t.value(v[0]).cols;
            let labels: Vec<usize> = (0..rows).map(|r| (r * 5 + 2) % cols).collect();
            t.softmax_cross_entropy(v[0], &labels)
        })),
    ];

    let mut failures = Vec::new();
    let mut overall = 0.0f64;
    for (name, arity, build) in &ops {
        let mut worst = 0.0f64;
        for _ in 0..GRAD_CASES {
            let rows = rng.random_range(1..4);
            let cols = rng.random_range(2..5);
            let inputs: Vec<Matrix> = match *name {
                "affine" => {
                    let out = rng.random_range(1..4);
                    vec![
                        random_matrix(rows, cols, &mut rng, &gaussian),
                        random_matrix(out, cols, &mut rng, &gaussian),
                        random_matrix(1, out, &mut rng, &gaussian),
                    ]
                }
                "log" => vec![random_matrix(rows, cols, &mut rng, &positive)],
                "relu" => vec![random_matrix(rows, cols, &mut rng, &relu_safe)],
                "clamp" => vec![random_matrix(rows, cols, &mut rng, &clamp_safe)],
                _ => (0..*arity).map(|_| random_matrix(rows, cols, &mut rng, &gaussian)).collect(),
            };
            worst = worst.max(grad_gap(build.as_ref(), inputs, &mut rng));
        }
        overall = overall.max(worst);
        if !(worst < GRAD_REL_TOL) {
            failures.push(format!("{name} {worst:.2e}"));
        }
    }
    let detail = if failures.is_empty() {
        format!("{} ops x {GRAD_CASES} cases, max relative error {overall:.3e} (< {GRAD_REL_TOL:e})", ops.len())
    } else {
        format!("failing ops: {}", failures.join(", "))
    };
    outcome(failures.is_empty(), detail)
}

// ---- criterion 4

fn training_effectiveness(f: &Fixture) -> Outcome {
    let report = &f.trained.report;
    let (first, last) = (report.first_nll().unwrap(), report.final_nll().unwrap());
    let ratio = last / first;
    outcome(
        ratio <= NLL_RATIO_MAX && f.train_seconds < TRAIN_BUDGET_S && report.epochs.len() == FLOW_EPOCHS,
        format!(
            "NLL {first:.4} -> {last:.4}, ratio {ratio:.3} (<= {NLL_RATIO_MAX}), {FLOW_EPOCHS} epochs in {:.1} s (< {TRAIN_BUDGET_S} s)",
            f.train_seconds
        ),
    )
}

// ---- criterion 5

fn latent_class_structure(f: &Fixture) -> Outcome {
    let clf_acc = f.classifier.accuracy(&f.test).unwrap();
    let correct = f
        .test
        .rows
        .iter()
        .zip(&f.test.labels)
        .enumerate()
        .filter(|(i, (x, &y))| {
            let k = latent_predict(
                &f.trained.flow,
                &f.trained.dequantizer,
                &f.test.schema,
                &f.means.means,
                x,
                derive_seed(SEED, *i as u64),
            )
            .unwrap();
            k == y
        })
        .count();
    let latent_acc = correct as f64 / f.test.len() as f64;
    outcome(
        clf_acc >= CLASSIFIER_ACC_MIN && latent_acc >= LATENT_ACC_MIN,
        format!("latent accuracy {latent_acc:.4} (>= {LATENT_ACC_MIN}) with classifier accuracy {clf_acc:.4} (>= {CLASSIFIER_ACC_MIN})"),
    )
}

// ---- criterion 6

fn success_rate(f: &Fixture) -> Outcome {
    let ce = f.explainer();
    let (rows, targets) = f.eval_rows();
    let start = Instant::now();
    let out = ce
        .explain_batch(&rows, &targets, &AlphaMode::Search(default_alpha_grid(2.0)), SEED)
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let rate = 100.0 * out.iter().filter(|r| r.success).count() as f64 / out.len() as f64;
    outcome(
        rate >= SUCCESS_MIN && secs < SEARCH_BUDGET_S,
        format!("success {rate:.2}% (>= {SUCCESS_MIN}%) on {EVAL_N} instances in {secs:.3} s (< {SEARCH_BUDGET_S} s)"),
    )
}

// ---- criterion 7

fn reproducible_generation(f: &Fixture) -> Outcome {
    let ce = f.explainer();
    let (rows, targets) = f.eval_rows();
    let mode = AlphaMode::Search(default_alpha_grid(2.0));
    let bits = |seed| {
        ce.explain_batch(&rows, &targets, &mode, seed)
            .unwrap()
            .into_iter()
            .map(|r| {
                let mut v: Vec<u64> = r.continuous.iter().map(|x| x.to_bits()).collect();
                v.extend(r.categorical.iter().map(|&c| c as u64));
                v.push(r.alpha.unwrap().to_bits());
                v
            })
            .collect::<Vec<_>>()
    };
    let identical = bits(SEED) == bits(SEED);

    let gs = GrowingSpheresConfig::default();
    let probes = 20;
    let mut min_var = f64::INFINITY;
    for (x, &y) in rows.iter().zip(&targets).take(probes) {
        let l1: Vec<f64> = (0..100)
            .map(|s| {
                let r = growing_spheres(&f.classifier, x, y, &gs, derive_seed(SEED, s)).unwrap();
                l1_distance(x, &r.instance()).unwrap()
            })
            .collect();
        min_var = min_var.min(mean_var(&l1).1);
    }
    outcome(
        identical && min_var > 0.0,
        format!(
            "same-seed reruns bit-identical: {identical}; growing-spheres smallest per-instance l1 variance over 100 seeds ({probes} instances) {min_var:.3e} (> 0)"
        ),
    )
}

fn bench_config(alpha: AlphaMode) -> BenchConfig {
    BenchConfig {
        methods: vec![Method::CeFlow, Method::GrowingSpheres],
        n_instances: EVAL_N,
        alpha,
        seed: SEED,
        ..BenchConfig::default()
    }
}

fn main() {
    let fixture = Fixture::build();
    let f = &fixture;

    let search = benchmark(&f.test, &f.mad, &f.artifacts(), &bench_config(AlphaMode::Search(default_alpha_grid(2.0)))).unwrap();
    let (ce_rep, gs_rep) = (&search.reports[0], &search.reports[1]);

    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    results.push((1, "invertibility", invertibility(f)));
    results.push((2, "log-det exactness", logdet_exactness()));
    results.push((3, "gradient correctness", gradient_correctness()));
    results.push((4, "training effectiveness", training_effectiveness(f)));
    results.push((5, "latent class structure", latent_class_structure(f)));
    results.push((6, "success rate", success_rate(f)));
    results.push((7, "robustness (a) reproducibility", reproducible_generation(f)));
    results.push((
        7,
        "robustness (b) l1 variance",
        outcome(
            ce_rep.l1_var < gs_rep.l1_var,
            format!("ceflow l1_var {:.4} vs growing-spheres {:.4} (must be lower)", ce_rep.l1_var, gs_rep.l1_var),
        ),
    ));

    let fixed = benchmark(&f.test, &f.mad, &f.artifacts(), &bench_config(AlphaMode::Fixed(1.0))).unwrap();
    let (ce_t, gs_t) = (fixed.reports[0].time_mean_s, fixed.reports[1].time_mean_s);
    results.push((
        8,
        "speed",
        outcome(
            ce_t < SPEED_RATIO_MAX * gs_t,
            format!("ceflow (alpha fixed 1.0) {ce_t:.3e} s vs growing-spheres {gs_t:.3e} s per sample (ratio {:.3} < {SPEED_RATIO_MAX})", ce_t / gs_t),
        ),
    ));

    results.push((
        9,
        "density plausibility",
        outcome(
            ce_rep.log_density > gs_rep.log_density,
            format!("ceflow log-density {:.4} vs growing-spheres {:.4}", ce_rep.log_density, gs_rep.log_density),
        ),
    ));

    let curve: Vec<f64> = search.alpha_sweep.iter().map(|p| p.success).collect();
    let peak = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_max = curve.iter().position(|&s| s == peak).unwrap();
    let monotone = curve[..=first_max].windows(2).all(|w| w[0] <= w[1]);
    let ce = f.explainer();
    let (rows, targets) = f.eval_rows();
    let grid = default_alpha_grid(2.0);
    let again = alpha_sweep(&ce, &rows, &targets, &grid, derive_seed(SEED, 0)).unwrap();
    let same_csv = alpha_sweep_csv(&again).unwrap() == alpha_sweep_csv(&search.alpha_sweep).unwrap();
    results.push((
        10,
        "alpha sensitivity",
        outcome(
            monotone && same_csv,
            format!(
                "success curve non-decreasing to first max ({peak:.1}% at alpha {:.1}): {monotone}; alpha_sweep.csv reproducible: {same_csv}",
                grid[first_max]
            ),
        ),
    ));

    results.push((11, "persistence", persistence(f)));

    let mut failed = 0;
    for (n, name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---- criterion 11

fn run(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ceflow")).args(args).output().unwrap();
    assert!(out.status.success(), "ceflow {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn persistence(f: &Fixture) -> Outcome {
    let mut bundle = ModelBundle::new(f.train.schema.clone());
    bundle.classifier = Some(f.classifier.clone());
    bundle.flow = Some(f.trained.flow.clone());
    bundle.dequantizer = Some(f.trained.dequantizer.clone());
    bundle.gmm = Some(f.trained.gmm.clone());
    bundle.train_report = Some(f.trained.report.clone());
    bundle.class_means = Some(f.means.clone());
    bundle.mad = Some(f.mad.clone());
    let bytes = bundle_to_bytes(&bundle).unwrap();
    let back = bundle_from_bytes(&bytes).unwrap();
    let in_memory = back == bundle && bundle_to_bytes(&back).unwrap() == bytes;

    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, schema, test, model) = (p("train.csv"), p("schema.json"), p("test.csv"), p("model.json"));
    run(&["synth", "--out", &data, "--schema-out", &schema, "--test-out", &test, "--n", "400", "--test-n", "60", "--seed", "3"]);
    run(&["train-clf", "--data", &data, "--schema", &schema, "--model", &model, "--epochs", "20", "--seed", "3"]);
    run(&["train-flow", "--data", &data, "--model", &model, "--epochs", "3", "--seed", "3"]);
    run(&["means", "--data", &data, "--model", &model, "--seed", "3"]);
    let file_bytes = std::fs::read(&model).unwrap();
    let on_disk = bundle_to_bytes(&bundle_from_bytes(&file_bytes).unwrap()).unwrap() == file_bytes;

    let outputs: Vec<Vec<u8>> = ["a.csv", "b.csv"]
        .iter()
        .map(|name| {
            let out = p(name);
            run(&["generate", "--model", &model, "--data", &test, "--out", &out, "--seed", "11"]);
            std::fs::read(Path::new(&out)).unwrap()
        })
        .collect();
    let cross_process = outputs[0] == outputs[1] && !outputs[0].is_empty();
    outcome(
        in_memory && on_disk && cross_process,
        format!("bundle byte-identical round trip (memory {in_memory}, file {on_disk}); two generate processes identical: {cross_process}"),
    )
}
