//! `stnet`: synthesize data, train, evaluate, and inspect the counter.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stnet_core::analysis::{
    count_params_flops_with, model_grad_check, true_count, Checkpoint, Metrics, TrainConfig, Trainer, EVAL_CHUNK,
};
use stnet_core::data::{
    generate_dataset, read_dataset, write_dataset, write_density_grid, write_density_heatmap, CrowdSample, SceneSpec,
    DEFAULT_SIGMA,
};
use stnet_core::scale_tree::{BlockKind, CrossScaleGates, GateMode, LeafAssignment};
use stnet_core::supervision::compose_batch;
use stnet_core::tensor::{GradCheckConfig, Tensor};

#[derive(Parser)]
#[command(name = "stnet", version, about = "Scale-tree crowd counting at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, point sidecars, manifest).
    Synth(SynthArgs),
    /// Train from a `key = value` config file.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground-truth oracle) on a dataset.
    Eval(EvalArgs),
    /// Parameter/FLOP accounting and receptive fields of one enhancer block.
    Analyze(AnalyzeArgs),
    /// Finite-difference check of the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory; the manifest is written inside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    min_count: usize,
    #[arg(long, default_value_t = 20)]
    max_count: usize,
    /// Pure-background scenes (no heads).
    #[arg(long)]
    background: bool,
    #[arg(long, default_value_t = 0.5)]
    clutter: f64,
    /// 1 (PGM) or 3 (PPM).
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    background: Option<PathBuf>,
    /// Checkpoint written after every epoch (default: the config's, else stnet.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Append one machine-readable record per epoch to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest to evaluate.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "oracle", required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the ground-truth densities themselves.
    #[arg(long)]
    oracle: bool,
    /// Density kernel width used to render ground truth.
    #[arg(long)]
    sigma: Option<f64>,
    /// Write `<image>_density.ppm` heatmaps and `<image>_density.txt` grids here.
    #[arg(long)]
    export: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Tree,
    Standard,
}

#[derive(Clone, Copy, ValueEnum)]
enum Assignment {
    Reverse,
    Forward,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum, default_value = "tree")]
    kind: Kind,
    #[arg(long, default_value_t = 18)]
    d: usize,
    #[arg(long, default_value_t = 8)]
    height: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, value_enum, default_value = "reverse")]
    leaf_assignment: Assignment,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model configuration (default model when absent).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Check a trained model instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Side of the synthetic probe images.
    #[arg(long, default_value_t = 24)]
    size: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Frozen gate values.
    #[arg(long, default_value_t = 0.35)]
    alpha: f64,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    /// Print every probe.
    #[arg(long)]
    verbose: bool,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        width: a.width,
        height: a.height,
        count_range: if a.background { (0, 0) } else { (a.min_count, a.max_count) },
        clutter_level: a.clutter,
        channels: a.channels,
        seed: a.seed,
        ..SceneSpec::default()
    };
    let samples = generate_dataset(&spec, a.count)?;
    let manifest = write_dataset(&a.out, &samples)?;
    let heads: usize = samples.iter().map(CrowdSample::count).sum();
    let bg = samples.iter().filter(|s| s.is_background).count();
    println!(
        "wrote {} scenes ({bg} background, {heads} heads) to {}",
        samples.len(),
        manifest.display()
    );
    Ok(())
}

fn load(path: &Path, sigma: f64) -> Result<Vec<CrowdSample>> {
    read_dataset(path, sigma).with_context(|| format!("loading {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut trainer = match &a.resume {
        Some(path) => {
            ensure!(a.config.is_none() && a.overrides.is_empty(), "--resume uses the checkpoint's configuration");
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            Trainer::resume(&ck)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for kv in &a.overrides {
                let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            Trainer::new(&cfg)?
        }
    };
    let cfg = &mut trainer.config;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    for (slot, flag) in [
        (&mut cfg.train_manifest, &a.train),
        (&mut cfg.val_manifest, &a.val),
        (&mut cfg.background_manifest, &a.background),
        (&mut cfg.checkpoint, &a.checkpoint),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    cfg.validate()?;
    let cfg = trainer.config.clone();
    let out = cfg.checkpoint.clone().unwrap_or_else(|| PathBuf::from("stnet.ckpt"));

    let (mut train, mut bg) = (Vec::new(), Vec::new());
    if let Some(p) = &cfg.train_manifest {
        for s in load(p, cfg.sigma)? {
            if s.is_background {
                bg.push(s);
            } else {
                train.push(s);
            }
        }
    }
    if let Some(p) = &cfg.background_manifest {
        bg.extend(load(p, cfg.sigma)?);
    }
    let val = match &cfg.val_manifest {
        Some(p) => load(p, cfg.sigma)?
            .into_iter()
            .filter(|s| !s.is_background)
            .collect(),
        None => Vec::new(),
    };
    if trainer.epoch < cfg.epochs && train.is_empty() {
        bail!("no training data: set train_manifest in the config or pass --train");
    }

    if !val.is_empty() && trainer.epoch == 0 {
        let m = trainer.validate(&val)?;
        println!("untrained: {m}");
    }
    let mut log = match &a.log {
        Some(p) => Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .with_context(|| format!("opening {}", p.display()))?,
        ),
        None => None,
    };
    trainer.checkpoint().save(&out)?;
    while trainer.epoch < cfg.epochs {
        let entry = trainer.run_epoch(&train, &val, &bg)?;
        println!("{entry}");
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", entry.record())?;
        }
        trainer.checkpoint().save(&out)?;
    }
    if let Some(last) = trainer.log.last() {
        println!("{}", last.record());
    }
    println!("checkpoint {} (epoch {})", out.display(), trainer.epoch);
    Ok(())
}

fn stem(i: usize) -> String {
    format!("img_{i:05}")
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let mut t = Trainer::resume(&ck)?;
            t.model.set_mode(GateMode::Eval);
            Some((t.model, t.config.sigma))
        }
        None => None,
    };
    let sigma = a
        .sigma
        .or(model.as_ref().map(|(_, s)| *s))
        .unwrap_or(DEFAULT_SIGMA);
    let samples = load(&a.data, sigma)?;
    ensure!(!samples.is_empty(), "{} lists no images", a.data.display());

    let densities: Vec<Tensor> = match &model {
        Some((m, _)) => {
            let mut out = Vec::with_capacity(samples.len());
            for group in samples.chunks(EVAL_CHUNK) {
                let images: Vec<&Tensor> = group.iter().map(|s| &s.image).collect();
                let d = m.predict(&Tensor::stack(&images)?)?.density;
                out.extend((0..group.len()).map(|k| d.item(k)));
            }
            out
        }
        None => samples.iter().map(CrowdSample::density_or_zeros).collect(),
    };
    let counts = samples
        .iter()
        .zip(&densities)
        .map(|(s, d)| (d.sum(), true_count(s)))
        .collect();
    let metrics = Metrics::from_counts(counts)?;

    if let Some(dir) = &a.export {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (i, d) in densities.iter().enumerate() {
            write_density_heatmap(&dir.join(format!("{}_density.ppm", stem(i))), d)?;
            write_density_grid(&dir.join(format!("{}_density.txt", stem(i))), d)?;
        }
        println!("exported {} density maps to {}", densities.len(), dir.display());
    }
    println!("{metrics}");
    println!("{}", metrics.record());
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let kind = match a.kind {
        Kind::Tree => BlockKind::Tree,
        Kind::Standard => BlockKind::Standard,
    };
    let assign = match a.leaf_assignment {
        Assignment::Reverse => LeafAssignment::Reverse,
        Assignment::Forward => LeafAssignment::Forward,
    };
    let report = count_params_flops_with(kind, a.d, a.height, a.width, assign)?;
    println!("{report}");
    println!("{}", report.record());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let model = match (&a.checkpoint, &a.config) {
        (Some(_), Some(_)) => bail!("give either --checkpoint or --config"),
        (Some(path), None) => Trainer::resume(&Checkpoint::load(path)?)?.model,
        (None, cfg) => {
            let cfg = match cfg {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            Trainer::new(&cfg)?.model
        }
    };
    let base = SceneSpec {
        width: a.size,
        height: a.size,
        count_range: (1, 6),
        head_radius_range: (1.0, 2.0),
        seed: a.seed,
        ..SceneSpec::default()
    };
    let crowd = generate_dataset(&base, a.batch)?;
    let bg = generate_dataset(&SceneSpec { count_range: (0, 0), seed: a.seed + 1, ..base }, 2)?;
    let lambda = if a.batch > 1 { 0.25 } else { 0.0 };
    let batch = compose_batch(&crowd, &bg, a.batch, lambda, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    let cfg = GradCheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        ..GradCheckConfig::default()
    };
    let report = model_grad_check(&model, &batch, CrossScaleGates::fixed(a.alpha, a.beta), a.probes, a.seed, &cfg)?;
    if a.verbose {
        println!("{report}");
    } else {
        let last = report.to_string();
        println!("{}", last.lines().last().unwrap_or_default());
    }
    println!(
        "gradcheck checked={} excluded={} unresolved={} max_rel={:?} mean_rel={:?} tolerance={:?} step={:?} passed={}",
        report.checked_count(),
        report.excluded(),
        report.unresolved(),
        report.max_rel_error(),
        report.mean_rel_error(),
        a.tolerance,
        a.step,
        report.passed()
    );
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Analyze(a) => analyze(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
