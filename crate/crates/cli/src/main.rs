//! `sita`: train source models, adapt predictions to single test images, and
//! run the evaluation, latency and ablation experiments.
//!
//! Settings come from an optional `key = value` config file, then `--set`
//! overrides, then subcommand flags. Exit status: 0 success, 2 configuration
//! error, 3 data or format error, 4 internal invariant violation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sita_core::adapt::{predict, PredictMode};
use sita_core::data::{corrupt_dataset, load_images, write_raw_images, CorruptionSpec};
use sita_core::harness::{
    ablation_sweep, bench_latency, evaluate, latency_csv, sweep_csv, Condition, ExperimentConfig, SweepAxis,
};
use sita_core::model::{load_weights, save_weights};
use sita_core::trainer::train_source_model;
use sita_core::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "sita", version, about = "Single-image test-time adaptation for batch-norm CNNs")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a source model and save it.
    Train(TrainArgs),
    /// Predict every image of a raw image file.
    Predict(PredictArgs),
    /// Accuracy under corruptions; writes a CSV report.
    Evaluate(EvaluateArgs),
    /// Corrupt a dataset and write it as a raw image file.
    Corrupt(CorruptArgs),
    /// Per-image latency of each mode.
    Bench(BenchArgs),
    /// Ablation sweep along one axis; writes a CSV report.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Option<String>,
    /// Image file (raw or CIFAR-10 binary) or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptFlags {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long = "n-augments")]
    n_augments: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Raw image file; every image in it is predicted.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    adapt: AdaptFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<String>,
    /// Comma-separated corruption names.
    #[arg(long)]
    corruptions: Option<String>,
    /// A level, a comma list, or an inclusive range such as `1..5`.
    #[arg(long)]
    severity: Option<String>,
    /// Also evaluate the uncorrupted images.
    #[arg(long)]
    clean: bool,
    #[command(flatten)]
    adapt: AdaptFlags,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    kind: String,
    #[arg(long)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated modes.
    #[arg(long, default_value = "source,augbn,augbn-ops")]
    modes: String,
    #[arg(long)]
    reps: Option<usize>,
    /// Raw image file whose first image is timed; defaults to a synthetic image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<String>,
    /// `lambda`, `n-augments`, `loo-augment` or `bn-mask`.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid for `lambda` and `n-augments`.
    #[arg(long, default_value = "")]
    grid: String,
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(e.class()))
        }
    }
}

fn exit_status(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Internal => 4,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &cli.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`--set {item}`: expected KEY=VALUE")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    match cli.command {
        Command::Train(args) => train(cfg, args),
        Command::Predict(args) => predict_images(cfg, args),
        Command::Evaluate(args) => evaluate_cmd(cfg, args),
        Command::Corrupt(args) => corrupt(cfg, args),
        Command::Bench(args) => bench(cfg, args),
        Command::Sweep(args) => sweep(cfg, args),
    }
}

fn set_opt(cfg: &mut ExperimentConfig, key: &str, value: Option<impl ToString>) -> Result<()> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn apply_adapt(cfg: &mut ExperimentConfig, flags: AdaptFlags) -> Result<()> {
    set_opt(cfg, "mode", flags.mode)?;
    set_opt(cfg, "lambda", flags.lambda)?;
    set_opt(cfg, "n_augments", flags.n_augments)?;
    set_opt(cfg, "seed", flags.seed)
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn train(mut cfg: ExperimentConfig, args: TrainArgs) -> Result<()> {
    set_opt(&mut cfg, "arch", args.arch)?;
    set_opt(&mut cfg, "data", args.data)?;
    set_opt(&mut cfg, "epochs", args.epochs)?;
    set_opt(&mut cfg, "seed", args.seed)?;
    let train_cfg = cfg.train_config()?;
    let dataset = cfg.dataset(true)?;
    let classes = dataset.iter().map(|d| d.label).max().unwrap_or(0) + 1;
    let classes = classes.max(cfg.parsed("classes")?);
    let (model, report) = train_source_model(cfg.arch()?, classes, &dataset, &train_cfg)?;
    save_weights(&model, &args.out)?;
    println!("epoch,loss,accuracy");
    for (i, (loss, acc)) in report.epoch_loss.iter().zip(&report.epoch_accuracy).enumerate() {
        println!("{},{loss:.6},{acc:.4}", i + 1);
    }
    Ok(())
}

fn predict_images(mut cfg: ExperimentConfig, args: PredictArgs) -> Result<()> {
    apply_adapt(&mut cfg, args.adapt)?;
    let model = load_weights(&args.model)?;
    let mode = cfg.mode()?;
    let adapt = cfg.augbn_config()?;
    let images = load_images(&args.image)?;
    println!("index,label,class,entropy,prior");
    for (i, item) in images.iter().enumerate() {
        let p = predict(&model, &item.image, mode, &adapt)?;
        let prior = p.chosen_prior.map(|v| v.to_string()).unwrap_or_default();
        println!("{i},{},{},{:.6},{prior}", item.label, p.class_id, p.entropy);
    }
    Ok(())
}

fn evaluate_cmd(mut cfg: ExperimentConfig, args: EvaluateArgs) -> Result<()> {
    set_opt(&mut cfg, "data", args.data)?;
    set_opt(&mut cfg, "corruptions", args.corruptions)?;
    set_opt(&mut cfg, "severity", args.severity)?;
    apply_adapt(&mut cfg, args.adapt)?;
    let model = load_weights(&args.model)?;
    let mut conditions = Vec::new();
    if args.clean {
        conditions.push(Condition::Clean);
    }
    conditions.extend(cfg.corruptions()?.into_iter().map(Condition::Corrupted));
    let dataset = cfg.dataset(false)?;
    let report = evaluate(&model, &dataset, &conditions, cfg.mode()?, &cfg.augbn_config()?, &cfg.fingerprint())?;
    write_report(&args.report, &report.to_csv(&cfg.resolved()))?;
    println!("mca,{}", report.mca);
    Ok(())
}

fn corrupt(mut cfg: ExperimentConfig, args: CorruptArgs) -> Result<()> {
    set_opt(&mut cfg, "data", args.data)?;
    let spec = CorruptionSpec::new(args.kind.parse()?, args.severity, args.seed)?;
    let images = corrupt_dataset(&cfg.dataset(false)?, &spec)?;
    write_raw_images(&args.out, &images)?;
    println!("wrote {} images", images.len());
    Ok(())
}

fn bench(mut cfg: ExperimentConfig, args: BenchArgs) -> Result<()> {
    set_opt(&mut cfg, "reps", args.reps)?;
    let model = load_weights(&args.model)?;
    let modes = args
        .modes
        .split(',')
        .map(|m| m.trim().parse::<PredictMode>())
        .collect::<Result<Vec<_>>>()?;
    let image = match &args.image {
        Some(path) => load_images(path)?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Data("image file is empty".into()))?
            .image,
        None => {
            cfg.set("data", "synthetic")?;
            cfg.set("test_per_class", "1")?;
            cfg.dataset(false)?.swap_remove(0).image
        }
    };
    let rows = bench_latency(&model, &image, &modes, &cfg.augbn_config()?, cfg.parsed("reps")?)?;
    let csv = latency_csv(&rows, &cfg.fingerprint());
    match &args.report {
        Some(path) => write_report(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn sweep(mut cfg: ExperimentConfig, args: SweepArgs) -> Result<()> {
    set_opt(&mut cfg, "data", args.data)?;
    let axis = SweepAxis::parse(&args.axis, &args.grid)?;
    let model = load_weights(&args.model)?;
    let conditions: Vec<Condition> = cfg.corruptions()?.into_iter().map(Condition::Corrupted).collect();
    let dataset = cfg.dataset(false)?;
    let fingerprint = cfg.fingerprint();
    let rows = ablation_sweep(&model, &dataset, &conditions, &axis, &cfg.augbn_config()?, &fingerprint)?;
    write_report(&args.report, &sweep_csv(&rows, &fingerprint, &cfg.resolved()))?;
    for r in &rows {
        println!("{},{},{}", r.series, r.point, r.report.mca);
    }
    Ok(())
}
