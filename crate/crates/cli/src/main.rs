use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use skewprune::analysis::{prune_knee, KneeOptions, ThresholdRule};
use skewprune::harness::{
    analyze_results, evaluate, finetune, load_checkpoint, run_experiment, save_checkpoint, train_sparse,
    CheckpointMeta, DatasetSpec, ExperimentConfig, Split, SynthSpec,
};
use skewprune::nn::{LrSchedule, TrainingConfig};
use skewprune::prune::{iterative_prune, IterativeConfig, PruneStrategy, StrategyKind};
use skewprune::{build_network, count_parameters, ArchSpec, Family, PruningCurve, SparsityReport};

#[derive(Parser)]
#[command(
    name = "skewprune",
    version,
    about = "Sparse training, γ-based channel pruning and Prune Knee analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network with an L1 penalty on BN scaling factors.
    Train(TrainArgs),
    /// Weight Skewness and γ statistics of a checkpoint.
    Ws {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Iteratively prune a checkpoint and write its pruning curve.
    Prune(PruneArgs),
    /// Prune Knee of a pruning-curve CSV.
    Knee {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        psi: f64,
        /// Window-3 smoothing before the knee search.
        #[arg(long)]
        smooth: bool,
        /// Use the literal last-point threshold form.
        #[arg(long)]
        literal_threshold: bool,
    },
    /// Run a full λ sweep from a JSON experiment config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Recompute knees and correlations of a finished sweep.
    Analyze {
        #[arg(long)]
        results_dir: PathBuf,
        /// Overrides the sweep's ψ.
        #[arg(long)]
        psi: Option<f64>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    arch: Family,
    /// Depth for vgg and resnet.
    #[arg(long)]
    depth: Option<usize>,
    /// Width multiplier for mobilenet.
    #[arg(long)]
    width: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    cosine: bool,
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
    /// JSON dataset spec; defaults to a synthetic set built from the flags below.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    #[arg(long, default_value_t = 4.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long, default_value_t = 5)]
    finetune_epochs: usize,
    #[arg(long, default_value = "global_gamma")]
    strategy: StrategyKind,
    /// Curve CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Also checkpoint the most-pruned network here.
    #[arg(long)]
    save_pruned: Option<PathBuf>,
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_dataset(path: &Path) -> Result<DatasetSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(skewprune::Error::from)?)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut arch = match a.arch {
        Family::Vgg | Family::Resnet => {
            let Some(depth) = a.depth else {
                bail!(skewprune::Error::InvalidArgument(format!(
                    "--depth is required for {}",
                    a.arch.as_str()
                )));
            };
            if a.arch == Family::Vgg {
                ArchSpec::vgg(depth)
            } else {
                ArchSpec::resnet(depth)
            }
        }
        Family::Mobilenet => ArchSpec::mobilenet(a.width.unwrap_or(1.0)),
    };
    let dataset = match &a.dataset {
        Some(p) => read_dataset(p)?,
        None => DatasetSpec::Synthetic(SynthSpec {
            num_classes: a.classes,
            samples_per_class: a.samples_per_class,
            mel_bands: 40,
            frames: a.frames,
            noise_level: a.noise,
            seed: a.data_seed,
        }),
    };
    arch = arch
        .with_input(dataset.sample_shape())
        .with_classes(dataset.num_classes())
        .with_base_channels(a.base_channels);
    let cfg = TrainingConfig {
        lambda: a.lambda,
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        lr_schedule: if a.cosine {
            LrSchedule::Cosine
        } else {
            LrSchedule::Constant
        },
        ..TrainingConfig::default()
    };
    let data = dataset.load(a.train_fraction)?;
    let net = build_network(&arch, a.seed)?;
    let out = train_sparse(net, &data, &cfg, None)?;
    let meta = CheckpointMeta {
        arch: arch.clone(),
        lambda: a.lambda,
        epochs: a.epochs,
        final_accuracy: Some(out.final_accuracy),
        seed: a.seed,
        training: Some(cfg),
        dataset: Some(dataset),
        train_fraction: Some(a.train_fraction),
        pruned_channels: 0,
    };
    save_checkpoint(&out.network, &meta, &a.out)?;
    print_json(&json!({
        "checkpoint": a.out,
        "arch": arch.label(),
        "params": count_parameters(&out.network),
        "final_accuracy": out.final_accuracy,
        "best_accuracy": out.best_accuracy,
        "best_epoch": out.best_epoch,
        "ws": out.sparsity.ws,
        "near_zero_fraction": out.sparsity.near_zero_fraction,
    }))
}

fn ws(ckpt: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let report = SparsityReport::for_network(&ck.network)?;
    print_json(&serde_json::to_value(report)?)
}

fn prune(a: PruneArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let (Some(dataset), Some(training)) = (&ck.meta.dataset, &ck.meta.training) else {
        bail!(skewprune::Error::InvalidArgument(
            "checkpoint carries no dataset or training config to evaluate with".into()
        ));
    };
    let data = dataset.load(ck.meta.train_fraction.unwrap_or(0.7))?;
    let cfg = IterativeConfig {
        step_fraction: a.step,
        finetune_epochs: a.finetune_epochs,
        strategy: PruneStrategy::new(a.strategy),
    };
    let outcome = iterative_prune(
        &ck.network,
        &cfg,
        |n| evaluate(n, &data, Split::Val),
        |n, epochs| finetune(n, &data, training, epochs),
    )?;
    outcome.curve.save_csv(&a.out)?;
    if let Some(dir) = &a.save_pruned {
        let removed = count_channels(&ck.network) - count_channels(&outcome.final_network);
        let meta = CheckpointMeta {
            pruned_channels: ck.meta.pruned_channels + removed,
            final_accuracy: outcome.curve.points.last().map(|p| p.accuracy),
            ..ck.meta.clone()
        };
        save_checkpoint(&outcome.final_network, &meta, dir)?;
    }
    print_json(&json!({
        "curve": a.out,
        "points": outcome.curve.points.len(),
        "complete": outcome.curve.complete,
        "failure": outcome.curve.failure,
        "baseline_accuracy": outcome.curve.baseline_accuracy(),
    }))
}

fn count_channels(net: &skewprune::Network) -> usize {
    net.batch_norms().map(|(_, _, bn)| bn.gamma.len()).sum()
}

fn knee(curve: &Path, psi: f64, smooth: bool, literal: bool) -> Result<()> {
    let curve = PruningCurve::load_csv(curve)?;
    let opts = KneeOptions {
        psi,
        threshold: if literal {
            ThresholdRule::LiteralLastPoint
        } else {
            ThresholdRule::MeanSpacing
        },
        smooth,
    };
    let k = prune_knee(&curve, &opts)?;
    print_json(&serde_json::to_value(k)?)
}

fn sweep(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let res = run_experiment(&cfg, out)?;
    let seeds: Vec<_> = res
        .seeds
        .iter()
        .map(|s| json!({"seed": s.seed, "rows": s.scatter.len(), "correlation": s.correlation}))
        .collect();
    print_json(&json!({"out": out, "complete": res.manifest.complete, "seeds": seeds}))
}

fn analyze(dir: &Path, psi: Option<f64>) -> Result<()> {
    let cfg = ExperimentConfig::load(&dir.join("config.json"))?;
    let mut opts = cfg.knee_options();
    if let Some(p) = psi {
        opts.psi = p;
    }
    let seeds = analyze_results(dir, &opts)?;
    let out: Vec<_> = seeds
        .iter()
        .map(|s| json!({"seed": s.seed, "scatter": s.scatter, "correlation": s.correlation}))
        .collect();
    print_json(&json!({"psi": opts.psi, "seeds": out}))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Ws { ckpt } => ws(&ckpt),
        Command::Prune(a) => prune(a),
        Command::Knee {
            curve,
            psi,
            smooth,
            literal_threshold,
        } => knee(&curve, psi, smooth, literal_threshold),
        Command::Sweep { config, out } => sweep(&config, &out),
        Command::Analyze { results_dir, psi } => analyze(&results_dir, psi),
    }
}

fn error_line(code: &str, message: &str) -> String {
    json!({"error": code, "message": message}).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", error_line("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<skewprune::Error>())
                .map_or("error", |e| e.code());
            eprintln!("{}", error_line(code, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
