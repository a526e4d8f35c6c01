//! `sfsa`: command-line pipeline around the source-free adaptation crate.
//!
//! Subcommands: `gen`, `train-source`, `adapt`, `tta`, `eval`. Every run is
//! deterministic given its resolved config and seed; reports embed the
//! resolved config and contain no timestamps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sfsa_core::adapt::{
    adapt, tta_episode, AdaptConfig, InitMode, ParamSubset, TtaConfig, TtaLoss,
};
use sfsa_core::bench::{
    evaluate, gen_split, group_miou, load_dataset, miou, save_dataset, train_source,
    ConfusionMatrix, DomainSpec, Sample, TrainConfig,
};
use sfsa_core::error::{Error, Result};
use sfsa_core::model::{load_checkpoint, save_checkpoint, update_norm_pass, ArchConfig, Model};
use sfsa_core::transforms::TransformParams;
use sfsa_core::{LabelMap, Tensor, NO_LABEL};

mod pool;

#[derive(Parser)]
#[command(name = "sfsa", about = "Source-free domain adaptation for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain benchmark datasets.
    Gen(GenArgs),
    /// Train the source model on the labeled source split.
    TrainSource(TrainSourceArgs),
    /// Adapt a source checkpoint to the unlabeled target split.
    Adapt(AdaptArgs),
    /// Episodic test-time adaptation over the target test split.
    Tta(TtaArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::TrainSource(a) => cmd_train_source(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Tta(a) => cmd_tta(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io(_) | Error::Format(_) | Error::Json(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

/// Seed precedence: explicit flag, then SFSA_SEED, then config file, then 7.
fn resolve_seed(flag: Option<u64>, from_config: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("SFSA_SEED") {
        return v
            .parse()
            .map_err(|_| Error::Config(format!("SFSA_SEED must be an unsigned integer, got {v:?}")));
    }
    Ok(from_config.unwrap_or(7))
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::Usage("--threads must be at least 1".into()));
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// metrics reporting shared by adapt / tta / eval

#[derive(Debug, Clone, Serialize)]
struct VariantMetrics {
    variant: String,
    split: String,
    miou: f64,
    per_class_iou: Vec<Option<f64>>,
    groups: Vec<(String, Option<f64>)>,
}

fn class_groups(c: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        ("background".to_string(), vec![0]),
        ("objects".to_string(), (1..c).collect()),
    ]
}

fn metrics_from_cm(variant: &str, split: &str, cm: &ConfusionMatrix) -> Result<VariantMetrics> {
    let (per_class, mean) = miou(cm)?;
    let groups = group_miou(&per_class, &class_groups(cm.num_classes()))?;
    Ok(VariantMetrics {
        variant: variant.to_string(),
        split: split.to_string(),
        miou: mean,
        per_class_iou: per_class,
        groups,
    })
}

fn eval_model(variant: &str, split: &str, model: &Model, samples: &[Sample]) -> Result<VariantMetrics> {
    let (cm, _) = evaluate(model, samples)?;
    metrics_from_cm(variant, split, &cm)
}

fn write_metrics_csv(path: &Path, rows: &[VariantMetrics]) -> Result<()> {
    let mut out = String::new();
    let c = rows.first().map(|r| r.per_class_iou.len()).unwrap_or(0);
    out.push_str("variant,split,miou");
    for j in 0..c {
        out.push_str(&format!(",iou_class{j}"));
    }
    if let Some(first) = rows.first() {
        for (name, _) in &first.groups {
            out.push_str(&format!(",group_{name}"));
        }
    }
    out.push('\n');
    let fmt = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.push_str(&format!("{},{},{}", r.variant, r.split, r.miou));
        for v in &r.per_class_iou {
            out.push_str(&format!(",{}", fmt(v)));
        }
        for (_, v) in &r.groups {
            out.push_str(&format!(",{}", fmt(v)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenConfig {
    seed: Option<u64>,
    n_source_train: usize,
    n_source_test: usize,
    n_target_train: usize,
    n_target_test: usize,
    source_spec: DomainSpec,
    target_spec: DomainSpec,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: None,
            n_source_train: 200,
            n_source_test: 50,
            n_target_train: 100,
            n_target_test: 100,
            source_spec: DomainSpec::source_default(),
            target_spec: DomainSpec::target_default(),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the four splits.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = read_config(&args.config)?;
    cfg.seed = Some(resolve_seed(args.seed, cfg.seed)?);
    let seed = cfg.seed.unwrap();
    if cfg.source_spec.num_classes != cfg.target_spec.num_classes
        || cfg.source_spec.height != cfg.target_spec.height
        || cfg.source_spec.width != cfg.target_spec.width
    {
        return Err(Error::Config("source and target specs disagree on classes or size".into()));
    }
    // independent deterministic sub-seeds per split
    let splits = [
        ("source_train", &cfg.source_spec, cfg.n_source_train, seed),
        ("source_test", &cfg.source_spec, cfg.n_source_test, seed.wrapping_add(1)),
        ("target_train", &cfg.target_spec, cfg.n_target_train, seed.wrapping_add(2)),
        ("target_test", &cfg.target_spec, cfg.n_target_test, seed.wrapping_add(3)),
    ];
    for (name, spec, n, s) in splits {
        let samples = gen_split(s, spec, n)?;
        save_dataset(args.out.join(name), &samples, spec)?;
    }
    write_json(&args.out.join("gen_config.json"), &cfg)?;
    println!("generated 4 splits under {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-source

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSourceConfig {
    seed: Option<u64>,
    epochs: usize,
    base_lr: f64,
    lr_power: f64,
    arch: ArchConfig,
}

impl Default for TrainSourceConfig {
    fn default() -> Self {
        TrainSourceConfig {
            seed: None,
            epochs: 8,
            base_lr: 1e-3,
            lr_power: 0.9,
            arch: ArchConfig::default(),
        }
    }
}

#[derive(Args)]
struct TrainSourceArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint + training CSV).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

fn cmd_train_source(args: TrainSourceArgs) -> Result<()> {
    let mut cfg: TrainSourceConfig = read_config(&args.config)?;
    cfg.seed = Some(resolve_seed(args.seed, cfg.seed)?);
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.base_lr = lr;
    }
    let (samples, manifest) = load_dataset(args.data.join("source_train"))?;
    cfg.arch.num_classes = manifest.num_classes;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        base_lr: cfg.base_lr,
        lr_power: cfg.lr_power,
        seed: cfg.seed.unwrap(),
    };
    let (model, log) = train_source(&samples, &cfg.arch, &tc)?;
    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&model, args.out.join("source.sfsa"))?;
    let mut csv = String::from("epoch,iter,lr,loss\n");
    for r in &log {
        csv.push_str(&format!("{},{},{},{}\n", r.epoch, r.iter, r.lr, r.loss));
    }
    std::fs::write(args.out.join("train_source.csv"), csv)?;
    write_json(&args.out.join("train_source_config.json"), &cfg)?;
    println!("source checkpoint written to {}", args.out.join("source.sfsa").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// adapt

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AdaptCliConfig {
    seed: Option<u64>,
    epochs: usize,
    base_lr: f64,
    lr_power: f64,
    lambda_ema: f64,
    collage: bool,
    soft_loss: bool,
    hard_loss: bool,
    pl_augment: bool,
    uniform_threshold: Option<f64>,
    finetune: bool,
}

impl Default for AdaptCliConfig {
    fn default() -> Self {
        AdaptCliConfig {
            seed: None,
            epochs: 20,
            base_lr: 2.5e-4,
            lr_power: 0.9,
            lambda_ema: 0.99,
            collage: true,
            soft_loss: true,
            hard_loss: true,
            pl_augment: false,
            uniform_threshold: None,
            finetune: false,
        }
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Source checkpoint produced by `train-source`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Disable collage construction (train on whole images).
    #[arg(long)]
    no_collage: bool,
    /// Disable the soft consistency term.
    #[arg(long)]
    no_soft: bool,
    /// Disable the hard consistency term.
    #[arg(long)]
    no_hard: bool,
    /// Replace the class-wise median thresholds with a fixed value.
    #[arg(long)]
    uniform_threshold: Option<f64>,
    /// Initialize the target model from the norm-updated source model.
    #[arg(long)]
    finetune: bool,
    /// Only update normalization statistics; no training.
    #[arg(long)]
    norm_only: bool,
    /// Pseudo-label training only (no consistency branch).
    #[arg(long)]
    pl_only: bool,
    /// Ablation: pseudo-label the transformed image with cached labels
    /// instead of transforming the model's own prediction.
    #[arg(long)]
    pl_augment: bool,
    /// Worker pool cap for evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn cmd_adapt(args: AdaptArgs) -> Result<()> {
    let mut cfg: AdaptCliConfig = read_config(&args.config)?;
    cfg.seed = Some(resolve_seed(args.seed, cfg.seed)?);
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.base_lr = lr;
    }
    if args.no_collage {
        cfg.collage = false;
    }
    if args.no_soft {
        cfg.soft_loss = false;
    }
    if args.no_hard {
        cfg.hard_loss = false;
    }
    if args.uniform_threshold.is_some() {
        cfg.uniform_threshold = args.uniform_threshold;
    }
    if args.finetune {
        cfg.finetune = true;
    }
    if args.pl_only {
        cfg.soft_loss = false;
        cfg.hard_loss = false;
        cfg.pl_augment = false;
    } else if args.pl_augment {
        cfg.pl_augment = true;
        cfg.soft_loss = false;
        cfg.hard_loss = false;
    }
    check_threads(args.threads)?;

    let source = load_checkpoint(&args.checkpoint)?;
    let (train_samples, manifest) = load_dataset(args.data.join("target_train"))?;
    let (test_samples, _) = load_dataset(args.data.join("target_test"))?;
    let images: Vec<Tensor> = train_samples.iter().map(|s| s.image.clone()).collect();
    std::fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    rows.push(eval_model("no_adapt", "target_test", &source, &test_samples)?);

    if args.norm_only {
        let norm_model = update_norm_pass(&source, &images)?;
        rows.push(eval_model("norm_update", "target_test", &norm_model, &test_samples)?);
        save_checkpoint(&norm_model, args.out.join("adapted.sfsa"))?;
    } else {
        let mut core_cfg = AdaptConfig::new(
            TransformParams::for_size(manifest.height, manifest.width),
            cfg.seed.unwrap(),
        );
        core_cfg.epochs = cfg.epochs;
        core_cfg.base_lr = cfg.base_lr;
        core_cfg.lr_power = cfg.lr_power;
        core_cfg.lambda_ema = cfg.lambda_ema;
        core_cfg.use_collage = cfg.collage;
        core_cfg.use_soft = cfg.soft_loss;
        core_cfg.use_hard = cfg.hard_loss;
        core_cfg.pl_augment = cfg.pl_augment;
        core_cfg.uniform_threshold = cfg.uniform_threshold;
        core_cfg.init_mode = if cfg.finetune { InitMode::Finetune } else { InitMode::Scratch };

        let result = adapt(&source, &images, &core_cfg)?;
        rows.push(eval_model("norm_update", "target_test", &result.norm_model, &test_samples)?);
        rows.push(eval_model("adapted", "target_test", &result.model, &test_samples)?);
        save_checkpoint(&result.model, args.out.join("adapted.sfsa"))?;

        let mut csv = String::from(
            "epoch,iter,lr,loss_c,loss_r_soft,loss_r_hard,labeled_pixel_fraction",
        );
        for j in 0..source.num_classes() {
            csv.push_str(&format!(",threshold_class{j}"));
        }
        csv.push('\n');
        for r in &result.log {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.epoch, r.iter, r.lr, r.loss_c, r.loss_r_soft, r.loss_r_hard,
                r.labeled_pixel_fraction
            ));
            for t in &r.thresholds {
                csv.push_str(&format!(",{t}"));
            }
            csv.push('\n');
        }
        std::fs::write(args.out.join("train_log.csv"), csv)?;
    }

    #[derive(Serialize)]
    struct Report<'a> {
        resolved_config: &'a AdaptCliConfig,
        norm_only: bool,
        metrics: &'a [VariantMetrics],
    }
    write_json(
        &args.out.join("report.json"),
        &Report { resolved_config: &cfg, norm_only: args.norm_only, metrics: &rows },
    )?;
    write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
    for r in &rows {
        println!("{} {} miou {:.4}", r.variant, r.split, r.miou);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tta

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TtaCliConfig {
    seed: Option<u64>,
    loss: String,
    iters: usize,
    lr: f64,
    norm_affine_only: bool,
}

impl Default for TtaCliConfig {
    fn default() -> Self {
        TtaCliConfig {
            seed: None,
            loss: "consistency".to_string(),
            iters: 1,
            lr: 2.5e-4,
            norm_affine_only: false,
        }
    }
}

#[derive(Args)]
struct TtaArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptation loss: entropy or consistency.
    #[arg(long)]
    loss: Option<String>,
    /// Optimization steps per image.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Worker pool cap for the episodes.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn cmd_tta(args: TtaArgs) -> Result<()> {
    let mut cfg: TtaCliConfig = read_config(&args.config)?;
    cfg.seed = Some(resolve_seed(args.seed, cfg.seed)?);
    if let Some(l) = args.loss {
        cfg.loss = l;
    }
    if let Some(i) = args.iters {
        cfg.iters = i;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    check_threads(args.threads)?;
    let loss_kind = match cfg.loss.as_str() {
        "entropy" => TtaLoss::Entropy,
        "consistency" => TtaLoss::Consistency,
        other => {
            return Err(Error::Config(format!("unknown tta loss {other:?} (entropy|consistency)")))
        }
    };

    let source = load_checkpoint(&args.checkpoint)?;
    let (test_samples, manifest) = load_dataset(args.data.join("target_test"))?;
    let core_cfg = TtaConfig {
        loss_kind,
        iters_per_image: cfg.iters,
        lr: cfg.lr,
        param_subset: if cfg.norm_affine_only {
            ParamSubset::NormAffineOnly
        } else {
            ParamSubset::All
        },
        transform: TransformParams::for_size(manifest.height, manifest.width),
        seed: cfg.seed.unwrap(),
    };

    std::fs::create_dir_all(&args.out)?;
    let mut rows = Vec::new();
    rows.push(eval_model("no_adapt", "target_test", &source, &test_samples)?);

    let preds = pool::parallel_map(args.threads, test_samples.len(), |i| {
        tta_episode(&source, &test_samples[i].image, &core_cfg, i as u64)
    })?;
    let mut cm = ConfusionMatrix::new(source.num_classes());
    for (pred, s) in preds.iter().zip(&test_samples) {
        cm.accumulate(pred, &s.labels)?;
    }
    rows.push(metrics_from_cm("tta", "target_test", &cm)?);

    #[derive(Serialize)]
    struct Report<'a> {
        resolved_config: &'a TtaCliConfig,
        metrics: &'a [VariantMetrics],
    }
    write_json(&args.out.join("report.json"), &Report { resolved_config: &cfg, metrics: &rows })?;
    write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
    for r in &rows {
        println!("{} {} miou {:.4}", r.variant, r.split, r.miou);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Split directory name, e.g. source_test or target_test.
    #[arg(long)]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write color-mapped prediction rasters.
    #[arg(long)]
    dump_preds: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    check_threads(args.threads)?;
    let model = load_checkpoint(&args.checkpoint)?;
    let (samples, manifest) = load_dataset(args.data.join(&args.split))?;
    std::fs::create_dir_all(&args.out)?;

    let preds = pool::parallel_map(args.threads, samples.len(), |i| {
        sfsa_core::adapt::predict(&mut model.clone(), &samples[i].image)
    })?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for (pred, s) in preds.iter().zip(&samples) {
        cm.accumulate(pred, &s.labels)?;
    }
    let rows = vec![metrics_from_cm("checkpoint", &args.split, &cm)?];

    if args.dump_preds {
        let dir = args.out.join("preds");
        std::fs::create_dir_all(&dir)?;
        for (i, pred) in preds.iter().enumerate() {
            dump_colored(&dir.join(format!("pred_{i:04}.png")), pred, &manifest.spec)?;
        }
    }

    #[derive(Serialize)]
    struct Report<'a> {
        checkpoint: String,
        split: &'a str,
        metrics: &'a [VariantMetrics],
    }
    write_json(
        &args.out.join("report.json"),
        &Report {
            checkpoint: args.checkpoint.display().to_string(),
            split: &args.split,
            metrics: &rows,
        },
    )?;
    write_metrics_csv(&args.out.join("metrics.csv"), &rows)?;
    for r in &rows {
        println!("{} {} miou {:.4}", r.variant, r.split, r.miou);
    }
    Ok(())
}

fn dump_colored(path: &Path, pred: &LabelMap, spec: &DomainSpec) -> Result<()> {
    let (h, w) = (pred.height(), pred.width());
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = pred.get(y, x);
            let px = if v == NO_LABEL {
                [0u8; 3]
            } else {
                spec.palette[v as usize].map(|c| (c * 255.0).round() as u8)
            };
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Format(e.to_string()))
}
