//! `hct` — dataset synthesis, training, evaluation, fusion ablation, and
//! the finite-difference gradient suite, driven by a JSON config file with
//! flag overrides (flags win).
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error,
//! 3 numerical failure during training.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hct_core::checkpoint::load_checkpoint;
use hct_core::data::{generate_phantom, payload_checksum, read_dataset, write_dataset};
use hct_core::error::Error;
use hct_core::eval::{
    ablation_run, evaluate, metrics_csv, pr_csv, write_ablation_files, FoldResult, VariantResult,
};
use hct_core::gradcheck::{format_reports, run_suite, SuiteConfig};
use hct_core::model::{build_variant, ModelConfig, Variant};
use hct_core::seeding::mix_seed;
use hct_core::train::{train, AdamState, TrainConfig};

#[derive(Parser)]
#[command(
    name = "hct",
    version,
    about = "Two-modality phantom segmentation workbench"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset directory.
    Synth(SynthArgs),
    /// Train a variant on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a dataset directory.
    Eval(EvalArgs),
    /// Cross-validated comparison of fusion variants.
    Ablate(AblateArgs),
    /// Finite-difference verification of all differentiable ops.
    Gradcheck(GradcheckArgs),
}

/// Serializable run configuration: JSON file via `--config`, overridden by
/// flags, echoed into summary.json.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    synth: SynthParams,
    threshold: f64,
    folds: usize,
    variants: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthParams::default(),
            threshold: 0.5,
            folds: 5,
            variants: vec!["EF-TN".into(), "LF-TN".into(), "HCT".into()],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct SynthParams {
    seed: u64,
    patients: usize,
    slices: usize,
    size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            seed: 7,
            patients: 20,
            slices: 4,
            size: 64,
        }
    }
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig, Error> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    slices: Option<usize>,
    /// Square slice size (must divide by 16).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory produced by `hct synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Comma-separated backbone stage widths, e.g. 16,32,64,128.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Disable online augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Use classical L2-in-gradient weight decay instead of decoupled.
    #[arg(long)]
    classical_weight_decay: bool,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated variant list.
    #[arg(long)]
    variants: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test-only fault injection: corrupt this op's analytic gradients.
    #[arg(long, hide = true)]
    perturb_op: Option<String>,
}

fn parse_widths(text: &str) -> Result<[usize; 4], Error> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Error::config(format!("bad --widths {text:?}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| Error::config(format!("--widths wants exactly 4 values, got {text:?}")))
}

fn apply_model_overrides(
    cfg: &mut ModelConfig,
    variant: &Option<String>,
    d_embed: Option<usize>,
    depth: Option<usize>,
    heads: Option<usize>,
    widths: &Option<String>,
) -> Result<(), Error> {
    if let Some(v) = variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    if let Some(d) = d_embed {
        cfg.d_embed = d;
    }
    if let Some(t) = depth {
        cfg.depth = t;
    }
    if let Some(h) = heads {
        cfg.n_heads = h;
    }
    if let Some(w) = widths {
        cfg.backbone_widths = parse_widths(w)?;
    }
    Ok(())
}

fn write_summary(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ── Subcommands ──────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<u8, Error> {
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    if let Some(v) = args.seed {
        cfg.synth.seed = v;
    }
    if let Some(v) = args.patients {
        cfg.synth.patients = v;
    }
    if let Some(v) = args.slices {
        cfg.synth.slices = v;
    }
    if let Some(v) = args.size {
        cfg.synth.size = v;
    }
    let s = &cfg.synth;
    let dataset = generate_phantom(s.seed, s.patients, s.slices, s.size, s.size)?;
    write_dataset(&dataset, &args.out)?;
    let checksum = payload_checksum(&args.out)?;
    println!(
        "wrote {} samples ({} patients x {} slices, {}x{}) to {}",
        dataset.samples.len(),
        s.patients,
        s.slices,
        s.size,
        s.size,
        args.out.display()
    );
    println!("payload checksum: {checksum:016x}");
    Ok(0)
}

fn cmd_train(args: TrainArgs) -> Result<u8, Error> {
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    apply_model_overrides(
        &mut cfg.model,
        &args.variant,
        args.d_embed,
        args.depth,
        args.heads,
        &args.widths,
    )?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr0 = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.train.checkpoint_every = v;
    }
    if args.no_augment {
        cfg.train.augment = false;
    }
    if args.classical_weight_decay {
        cfg.train.decoupled_weight_decay = false;
    }
    cfg.train.validate()?;

    let dataset = read_dataset(&args.data)?;
    cfg.model.h = dataset.meta.h;
    cfg.model.w = dataset.meta.w;
    cfg.model.validate()?;

    let (mut model, mut opt, start_epoch) = match &args.resume {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.model.config != cfg.model {
                return Err(Error::config(format!(
                    "checkpoint config {:?} disagrees with requested {:?}",
                    loaded.model.config, cfg.model
                )));
            }
            let opt = loaded.opt.ok_or_else(|| {
                Error::config("checkpoint has no optimizer state to resume".to_string())
            })?;
            (loaded.model, opt, loaded.epoch)
        }
        None => {
            let model = build_variant::<f32>(&cfg.model, mix_seed(cfg.train.seed, 0x1017))?;
            let opt = AdamState::new(&model.store);
            (model, opt, 0)
        }
    };
    println!(
        "training {} ({} parameters) on {} samples for epochs {}..{}",
        cfg.model.variant,
        model.param_count(),
        dataset.samples.len(),
        start_epoch,
        cfg.train.epochs
    );
    let log = train(
        &mut model,
        &mut opt,
        &dataset.samples,
        &cfg.train,
        start_epoch,
        Some(&args.out),
    )?;
    if let Some(last) = log.last() {
        println!(
            "done: epoch {} mean loss {:.6e}; checkpoint at {}",
            last.epoch,
            last.mean_loss,
            args.out.join("model.ckpt").display()
        );
    }
    Ok(0)
}

fn cmd_eval(args: EvalArgs) -> Result<u8, Error> {
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    let dataset = read_dataset(&args.data)?;
    let loaded = load_checkpoint(&args.checkpoint)?;
    if (loaded.model.config.h, loaded.model.config.w) != (dataset.meta.h, dataset.meta.w) {
        return Err(Error::config(format!(
            "checkpoint expects {}x{} inputs but dataset is {}x{}",
            loaded.model.config.h, loaded.model.config.w, dataset.meta.h, dataset.meta.w
        )));
    }
    cfg.model = loaded.model.config.clone();
    let report = evaluate(&loaded.model, &dataset.samples, cfg.threshold)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let variant = loaded.model.config.variant.to_string();
    let result = VariantResult {
        variant: variant.clone(),
        folds: vec![FoldResult {
            fold: 0,
            metrics: report.metrics,
        }],
        mean: report.metrics,
        param_count: loaded.model.param_count(),
        pr: report.pr.clone(),
    };
    let metrics_path = args.out.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_csv(std::slice::from_ref(&result)))
        .map_err(|e| Error::io(&metrics_path, e))?;
    let pr_path = args.out.join(format!("pr_{variant}.csv"));
    std::fs::write(&pr_path, pr_csv(&report.pr)).map_err(|e| Error::io(&pr_path, e))?;
    let summary = serde_json::json!({
        "command": "eval",
        "config": cfg,
        "dataset": { "dir": args.data.display().to_string(), "n_samples": dataset.samples.len() },
        "checkpoint": args.checkpoint.display().to_string(),
        "metrics_percent": {
            "dsc": report.metrics.dsc * 100.0,
            "precision": report.metrics.precision * 100.0,
            "sensitivity": report.metrics.sensitivity * 100.0,
            "specificity": report.metrics.specificity * 100.0,
        },
        "averaging": "scalar metrics macro-averaged per slice; PR micro-averaged over pooled pixel counts",
    });
    write_summary(&args.out.join("summary.json"), &summary)?;
    println!(
        "evaluated {} samples: DSC {:.2} Pre {:.2} Sen {:.2} Spe {:.2} (percent)",
        dataset.samples.len(),
        report.metrics.dsc * 100.0,
        report.metrics.precision * 100.0,
        report.metrics.sensitivity * 100.0,
        report.metrics.specificity * 100.0
    );
    Ok(0)
}

fn cmd_ablate(args: AblateArgs) -> Result<u8, Error> {
    let mut cfg = load_run_config(args.common.config.as_ref())?;
    apply_model_overrides(
        &mut cfg.model,
        &None,
        args.d_embed,
        args.depth,
        args.heads,
        &args.widths,
    )?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.folds {
        cfg.folds = v;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(list) = &args.variants {
        cfg.variants = list.split(',').map(|s| s.trim().to_string()).collect();
    }
    let variants: Vec<Variant> = cfg
        .variants
        .iter()
        .map(|s| s.parse::<Variant>())
        .collect::<Result<_, _>>()?;
    cfg.train.validate()?;

    let dataset = read_dataset(&args.data)?;
    cfg.model.h = dataset.meta.h;
    cfg.model.w = dataset.meta.w;
    cfg.model.validate()?;

    let result = ablation_run(
        &dataset,
        &variants,
        &cfg.model,
        &cfg.train,
        cfg.folds,
        cfg.threshold,
    )?;
    write_ablation_files(&result, &args.out)?;
    let summary = serde_json::json!({
        "command": "ablate",
        "config": cfg,
        "dataset": { "dir": args.data.display().to_string(), "n_samples": dataset.samples.len() },
        "variants": result.variants.iter().map(|r| {
            serde_json::json!({
                "variant": r.variant,
                "param_count": r.param_count,
                "mean_percent": {
                    "dsc": r.mean.dsc * 100.0,
                    "precision": r.mean.precision * 100.0,
                    "sensitivity": r.mean.sensitivity * 100.0,
                    "specificity": r.mean.specificity * 100.0,
                },
            })
        }).collect::<Vec<_>>(),
        "hf_ef_lf_ordering_observed": result.hf_ef_lf_ordering_observed,
        "averaging": "scalar metrics macro-averaged per slice then per fold; PR micro-averaged over pooled pixel counts",
    });
    write_summary(&args.out.join("summary.json"), &summary)?;
    for r in &result.variants {
        println!(
            "{:<8} mean DSC {:.2}  Pre {:.2}  Sen {:.2}  Spe {:.2}  ({} params)",
            r.variant,
            r.mean.dsc * 100.0,
            r.mean.precision * 100.0,
            r.mean.sensitivity * 100.0,
            r.mean.specificity * 100.0,
            r.param_count
        );
    }
    if let Some(observed) = result.hf_ef_lf_ordering_observed {
        println!("HF > EF > LF ordering observed: {observed}");
    }
    Ok(0)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<u8, Error> {
    let cfg = SuiteConfig {
        seed: args.seed,
        perturb_op: args.perturb_op,
    };
    let reports = run_suite(&cfg)?;
    print!("{}", format_reports(&reports));
    let failures: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failures.is_empty() {
        println!("gradient suite passed (seed {})", args.seed);
        Ok(0)
    } else {
        println!(
            "gradient suite FAILED for {} (seed {})",
            failures.join(", "),
            args.seed
        );
        Ok(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
