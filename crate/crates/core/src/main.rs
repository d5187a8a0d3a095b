//! `selfdistill` command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime and I/O failures, 2 on usage
//! errors (bad flags or invalid configuration).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfdistill::checkpoint::{load_checkpoint, save_checkpoint};
use selfdistill::data::{make_transfer_benchmark, BenchmarkSpec, TransferBenchmark};
use selfdistill::manifest::Manifest;
use selfdistill::metrics::{fmt6, write_epoch_csv};
use selfdistill::sweep::{parse_lambda_grid, parse_seed_list, run_sweep, SweepConfig};
use selfdistill::trainer::{fit, pretrain, EncoderArch, PretrainConfig, TrainConfig};
use selfdistill::Error;

const BENCH_MANIFEST: &str = "manifest.txt";

#[derive(Parser)]
#[command(
    name = "selfdistill",
    version,
    about = "Self-distillation fine-tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transfer benchmark.
    Gen(GenArgs),
    /// Pretrain an encoder on the pretext split.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder on the downstream split.
    Finetune(FinetuneArgs),
    /// Run a lambda x seed ablation.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    classes: u64,
    #[arg(long, default_value_t = 2)]
    clusters_per_class: usize,
    #[arg(long, default_value_t = 2000)]
    pretrain_samples: usize,
    #[arg(long, default_value_t = 500)]
    train_samples: usize,
    #[arg(long, default_value_t = 500)]
    test_samples: usize,
    #[arg(long, default_value_t = 200)]
    probe_samples: usize,
    #[arg(long, default_value_t = 0.6)]
    cluster_stddev: f64,
    #[arg(long, default_value_t = 1.0)]
    center_spread: f64,
    #[arg(long, default_value_t = 4)]
    transforms: usize,
}

#[derive(Args)]
struct ArchArgs {
    /// Comma-separated hidden widths; empty for a single linear layer.
    #[arg(long, default_value = "64", value_parser = parse_widths)]
    hidden: Widths,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05, value_parser = parse_rate)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1.0, value_parser = parse_lambda, allow_negative_numbers = true)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 8e-6, value_parser = parse_rate)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_csv: PathBuf,
    #[arg(long)]
    out_ckpt: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    bench: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "0,0.1,1,10,100,1000", value_parser = parse_grid, allow_hyphen_values = true)]
    lambdas: Grid,
    #[arg(long, default_value = "0,1,2", value_parser = parse_seeds, allow_hyphen_values = true)]
    seeds: Seeds,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 8e-6, value_parser = parse_rate)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Use this encoder for every seed instead of pretraining one per seed.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = 0.05, value_parser = parse_rate)]
    pretrain_lr: f64,
    #[arg(long, default_value_t = 32)]
    pretrain_batch: usize,
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone)]
struct Widths(Vec<usize>);
#[derive(Clone)]
struct Grid(Vec<f64>);
#[derive(Clone)]
struct Seeds(Vec<u64>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    if s.trim().is_empty() {
        return Ok(Widths(Vec::new()));
    }
    s.split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(format!("invalid layer width {w:?}")),
        })
        .collect::<Result<_, _>>()
        .map(Widths)
}

fn parse_lambda(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("cannot parse {s:?}"))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!("lambda must be finite and nonnegative, got {s}"));
    }
    Ok(v)
}

fn parse_rate(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("cannot parse {s:?}"))?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(format!(
            "learning rate must be finite and nonnegative, got {s}"
        ));
    }
    Ok(v)
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    parse_lambda_grid(s).map(Grid).map_err(|e| e.to_string())
}

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    parse_seed_list(s).map(Seeds).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn create_parent(path: &Path) -> selfdistill::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

/// `<path>.manifest`, next to the artifact.
fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

fn load_bench(dir: &Path) -> selfdistill::Result<(BenchmarkSpec, TransferBenchmark)> {
    let manifest = Manifest::read(&dir.join(BENCH_MANIFEST))?;
    let spec = BenchmarkSpec::from_lookup(|k| manifest.get(k))?;
    let bench = TransferBenchmark::read_dir(dir, spec.clone())?;
    Ok((spec, bench))
}

fn record_bench(m: &mut Manifest, dir: &Path, spec: &BenchmarkSpec) {
    m.set("bench", display(dir));
    for (k, v) in spec.to_pairs() {
        m.set(&format!("bench.{k}"), v);
    }
}

fn arch_of(a: &ArchArgs) -> Result<EncoderArch, Failure> {
    if a.feature_dim == 0 {
        return Err(Failure::Usage("feature-dim must be at least 1".into()));
    }
    Ok(EncoderArch {
        hidden: a.hidden.0.clone(),
        feature_dim: a.feature_dim,
    })
}

fn widths(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let spec = BenchmarkSpec {
        input_dim: a.input_dim,
        num_classes: a.classes as usize,
        clusters_per_class: a.clusters_per_class,
        pretrain_samples: a.pretrain_samples,
        train_samples: a.train_samples,
        test_samples: a.test_samples,
        probe_samples: a.probe_samples,
        cluster_stddev: a.cluster_stddev,
        center_spread: a.center_spread,
        num_transforms: a.transforms,
        seed: a.seed,
    };
    spec.validate().map_err(usage)?;
    let bench = make_transfer_benchmark(&spec)?;
    fs::create_dir_all(&a.out).map_err(Error::from)?;
    bench.write_dir(&a.out)?;

    let mut m = Manifest::new("gen");
    for (k, v) in spec.to_pairs() {
        m.set(k, v);
    }
    m.set("out", display(&a.out));
    m.write(&a.out.join(BENCH_MANIFEST))?;
    println!("wrote benchmark to {}", a.out.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> CmdResult {
    let config = PretrainConfig {
        arch: arch_of(&a.arch)?,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch,
        seed: a.seed,
    };
    if a.batch == 0 {
        return Err(Failure::Usage("batch must be at least 1".into()));
    }
    let (spec, bench) = load_bench(&a.bench)?;
    let encoder = pretrain(&bench.pretext, &config)?;
    create_parent(&a.out)?;
    save_checkpoint(&a.out, &encoder, None)?;

    let mut m = Manifest::new("pretrain");
    record_bench(&mut m, &a.bench, &spec);
    m.set("epochs", config.epochs)
        .set("lr", config.learning_rate)
        .set("batch", config.batch_size)
        .set("seed", config.seed)
        .set("hidden", widths(&config.arch.hidden))
        .set("feature_dim", config.arch.feature_dim)
        .set("out", display(&a.out));
    m.write(&manifest_path(&a.out))?;
    println!("wrote encoder {:?} to {}", encoder.dims(), a.out.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> CmdResult {
    let config = TrainConfig {
        lambda: a.lambda,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
    };
    config.validate().map_err(usage)?;
    let (spec, bench) = load_bench(&a.bench)?;
    let pretrained = load_checkpoint(&a.model)?.encoder;
    let out = fit(
        &pretrained,
        &bench.train,
        &bench.test,
        &bench.probe,
        &config,
    )?;

    create_parent(&a.out_csv)?;
    let mut csv = BufWriter::new(File::create(&a.out_csv).map_err(Error::from)?);
    write_epoch_csv(&mut csv, &out.reports)?;
    csv.flush().map_err(Error::from)?;
    create_parent(&a.out_ckpt)?;
    save_checkpoint(&a.out_ckpt, &out.encoder, Some(&out.head))?;

    let mut m = Manifest::new("finetune");
    record_bench(&mut m, &a.bench, &spec);
    m.set("model", display(&a.model))
        .set("lambda", config.lambda)
        .set("epochs", config.epochs)
        .set("lr", config.learning_rate)
        .set("batch", config.batch_size)
        .set("seed", config.seed)
        .set("out_csv", display(&a.out_csv))
        .set("out_ckpt", display(&a.out_ckpt));
    m.write(&manifest_path(&a.out_ckpt))?;
    match out.reports.last() {
        Some(r) => println!(
            "epoch {}: test acc1 {} acc5 {} drift {}",
            r.epoch,
            fmt6(r.test_acc1),
            fmt6(r.test_acc5),
            fmt6(r.drift)
        ),
        None => println!("no epochs run"),
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let config = SweepConfig {
        train: TrainConfig {
            learning_rate: a.lr,
            epochs: a.epochs,
            batch_size: a.batch,
            ..TrainConfig::default()
        },
        pretrain: PretrainConfig {
            arch: arch_of(&a.arch)?,
            epochs: a.pretrain_epochs,
            learning_rate: a.pretrain_lr,
            batch_size: a.pretrain_batch,
            seed: 0,
        },
        jobs: a.jobs,
    };
    config.train.validate().map_err(usage)?;
    if a.epochs == 0 {
        return Err(Failure::Usage("sweep needs at least one epoch".into()));
    }
    if a.pretrain_batch == 0 {
        return Err(Failure::Usage("pretrain-batch must be at least 1".into()));
    }
    if !a.lambdas.0.contains(&0.0) {
        return Err(Failure::Usage("lambda grid must include 0".into()));
    }
    let (spec, bench) = load_bench(&a.bench)?;
    let pretrained = match &a.model {
        Some(p) => Some(load_checkpoint(p)?.encoder),
        None => None,
    };
    let report = run_sweep(
        &bench,
        &a.lambdas.0,
        &a.seeds.0,
        &config,
        pretrained.as_ref(),
    )?;

    create_parent(&a.out)?;
    let mut csv = BufWriter::new(File::create(&a.out).map_err(Error::from)?);
    report.write_csv(&mut csv)?;
    csv.flush().map_err(Error::from)?;

    let join = |v: Vec<String>| v.join(",");
    let mut m = Manifest::new("sweep");
    record_bench(&mut m, &a.bench, &spec);
    m.set(
        "lambdas",
        join(report.lambdas.iter().map(f64::to_string).collect()),
    )
    .set(
        "seeds",
        join(report.seeds.iter().map(u64::to_string).collect()),
    )
    .set("epochs", a.epochs)
    .set("lr", a.lr)
    .set("batch", a.batch);
    match &a.model {
        Some(p) => m.set("model", display(p)),
        None => m
            .set("pretrain_epochs", a.pretrain_epochs)
            .set("pretrain_lr", a.pretrain_lr)
            .set("pretrain_batch", a.pretrain_batch)
            .set("hidden", widths(&config.pretrain.arch.hidden))
            .set("feature_dim", config.pretrain.arch.feature_dim),
    };
    m.set("jobs", a.jobs).set("out", display(&a.out));
    m.write(&manifest_path(&a.out))?;

    println!("lambda  mean_acc1  mean_drift");
    for &l in &report.lambdas {
        println!(
            "{:<7} {:<10} {}",
            fmt6(l),
            fmt6(report.mean_acc1(l).unwrap_or(f64::NAN)),
            fmt6(report.mean_drift(l).unwrap_or(f64::NAN))
        );
    }
    Ok(())
}
