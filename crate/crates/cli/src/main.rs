//! `ceflow` command-line interface.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ceflow_core::cegen::AlphaMode;

#[derive(Parser, Debug)]
#[command(name = "ceflow", version, about = "Counterfactual explanations with class-conditional normalizing flows")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for all randomness in this command.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File of `key = value` lines applied as `--key=value` flags; explicit flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic mixed-type dataset and its schema.
    Synth(SynthArgs),
    /// Train the black-box classifier and start a model bundle.
    TrainClf(TrainClfArgs),
    /// Train the flow and dequantizer on classifier-labelled data.
    TrainFlow(TrainFlowArgs),
    /// Compute empirical latent class means.
    Means(MeansArgs),
    /// Generate counterfactuals for every row of a CSV.
    Generate(GenerateArgs),
    /// Score counterfactual quality and model agreement on a labelled CSV.
    Evaluate(EvaluateArgs),
    /// Compare counterfactual methods and write report tables.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    schema_out: PathBuf,
    /// Optional second file drawn from the same generator.
    #[arg(long)]
    test_out: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 500)]
    test_n: usize,
    #[arg(long, default_value_t = 4)]
    continuous: usize,
    #[arg(long, default_value_t = 2)]
    categorical: usize,
    #[arg(long, default_value_t = 3)]
    cardinality: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainClfArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Bundle to create (overwritten).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainFlowArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    /// Coupling-net hidden widths; default is two layers of max(64, 8 D).
    #[arg(long, value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 10.0)]
    clip_norm: f64,
    #[arg(long, default_value_t = 2.0)]
    scale_clamp: f64,
    #[arg(long, default_value_t = 1.0)]
    mean_scale: f64,
    #[arg(long, default_value_t = 1)]
    k_mc: usize,
    /// Mixture weights from predicted-class frequencies instead of uniform.
    #[arg(long)]
    empirical_prior: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MeansArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Explain {
    /// `search`, `search:<max>` or `fixed:<value>`.
    #[arg(long, default_value = "search", value_parser = parse_alpha)]
    alpha: AlphaMode,
    /// Use the signed class-mean difference (false: elementwise absolute value).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    signed_delta: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `next` for (prediction + 1) mod C, or a class index.
    #[arg(long, default_value = "next")]
    target: String,
    /// Only the first N rows.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    explain: Explain,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Schema of the data file; must match the bundle's.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// JSON output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    explain: Explain,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ceflow,growing-spheres")]
    methods: Vec<ceflow_core::bench::Method>,
    /// Evaluation instances.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 0.1)]
    gs_step: f64,
    #[arg(long, default_value_t = 200)]
    gs_samples: usize,
    #[arg(long, default_value_t = 10.0)]
    gs_max_radius: f64,
    /// Largest alpha in the success sweep.
    #[arg(long, default_value_t = 2.0)]
    sweep_max: f64,
    #[command(flatten)]
    explain: Explain,
    #[command(flatten)]
    common: Common,
}

fn parse_alpha(s: &str) -> Result<AlphaMode, String> {
    s.parse()
}

const SUBCOMMANDS: [&str; 7] = ["synth", "train-clf", "train-flow", "means", "generate", "evaluate", "bench"];

/// Splices `--key=value` flags from a `--config` file right after the
/// subcommand, so flags given on the command line override them.
fn expand_config(args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else if a == "--config" {
            path = args.get(i + 1).cloned();
        }
    }
    let Some(path) = path else { return Ok(args) };
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config file {path}"))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("{path}:{}: expected key = value", n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key == "config" {
            bail!("{path}:{}: config files cannot include other config files", n + 1);
        }
        injected.push(format!("--{key}={}", v.trim()));
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
