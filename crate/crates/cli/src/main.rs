//! `statenet`: dataset splitting, training, evaluation, prediction, augmentation
//! previews, plotting and weight export.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Deserialize;
use serde_json::json;

use statenet_core::augment::{augment_image, AugmentConfig};
use statenet_core::data::{self, Dataset, DatasetIndex, SplitTag};
use statenet_core::metrics::{self, Metric, Series};
use statenet_core::model::{self, ModelSpec};
use statenet_core::optim::{OptimizerConfig, OptimizerKind};
use statenet_core::rng::{stream, Domain};
use statenet_core::trainer::{self, TrainConfig};
use statenet_core::weights::{self, SaveOptions};
use statenet_core::{synth, Model};

#[derive(Parser)]
#[command(name = "statenet", version, about = "Cooking-state image classifier")]
struct Cli {
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Index a directory-per-class dataset and write a stratified split file.
    Split(SplitArgs),
    /// Train a model and write an event log and checkpoints.
    Train(Box<TrainArgs>),
    /// Evaluate saved weights on one split.
    Eval(EvalArgs),
    /// Rank the classes for one or more images.
    Predict(PredictArgs),
    /// Write randomly augmented copies of an image.
    AugmentPreview(PreviewArgs),
    /// Plot event logs as an SVG chart.
    Plot(PlotArgs),
    /// Print the confusion matrix of saved weights on one split.
    Confusion(ConfusionArgs),
    /// Copy weights (optionally a subset of layers) into a new container.
    ExportWeights(ExportArgs),
    /// Generate the synthetic 11-class shapes dataset.
    GenShapes(GenShapesArgs),
}

fn parse_fractions(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "expected three comma-separated fractions".to_string())
}

fn parse_blocks(s: &str) -> Result<Vec<usize>, String> {
    if s == "none" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset root with one sub-directory per class.
    #[arg(long)]
    data: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, value_parser = parse_fractions, default_value = "0.682,0.148,0.170")]
    fractions: [f64; 3],
    #[arg(long, env = "STATENET_SEED", default_value_t = 0)]
    seed: u64,
    /// Output split file (JSON).
    #[arg(long)]
    out: PathBuf,
}

/// Model architecture and input options shared by several verbs.
#[derive(Args, Deserialize, Default, Clone)]
#[serde(default, rename_all = "kebab-case")]
struct ModelArgs {
    /// Square input size in pixels [default: 150].
    #[arg(long)]
    image_size: Option<usize>,
    /// Retained VGG19 blocks, 1-5 [default: 4].
    #[arg(long)]
    base_blocks: Option<usize>,
    /// Base blocks excluded from updates: comma list or "none" [default: all retained blocks].
    #[arg(long)]
    frozen_blocks: Option<String>,
    /// Dropout after each head conv stage [default: 0.25].
    #[arg(long)]
    conv_dropout: Option<f32>,
    /// Dropout before the output layer [default: 0.5].
    #[arg(long)]
    dense_dropout: Option<f32>,
}

impl ModelArgs {
    fn spec(&self, class_count: usize) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(
            self.image_size.unwrap_or(150),
            self.base_blocks.unwrap_or(model::VGG19_DEPTHS.len() - 1),
        );
        spec.class_count = class_count;
        if let Some(blocks) = &self.frozen_blocks {
            let blocks = parse_blocks(blocks).map_err(|e| anyhow::anyhow!("--frozen-blocks: {e}"))?;
            spec.frozen_blocks = blocks.into_iter().collect::<BTreeSet<_>>();
        }
        if let Some(p) = self.conv_dropout {
            spec.conv_dropout = p;
        }
        if let Some(p) = self.dense_dropout {
            spec.dense_dropout = p;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Augmentation knobs.
#[derive(Args, Deserialize, Default, Clone)]
#[serde(default, rename_all = "kebab-case")]
struct AugmentArgs {
    /// Pixel scale factor [default: 0.00392156862745098 (1/255)].
    #[arg(long)]
    rescale: Option<f64>,
    /// Rotation range in degrees [default: 40].
    #[arg(long)]
    rotation_range: Option<f64>,
    /// Horizontal shift as a fraction of width [default: 0.2].
    #[arg(long)]
    width_shift_range: Option<f64>,
    /// Vertical shift as a fraction of height [default: 0.2].
    #[arg(long)]
    height_shift_range: Option<f64>,
    /// Shear intensity in radians [default: 0.2].
    #[arg(long)]
    shear_range: Option<f64>,
    /// Zoom range [default: 0.2].
    #[arg(long)]
    zoom_range: Option<f64>,
    /// Random horizontal flips [default: true].
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    horizontal_flip: Option<bool>,
}

impl AugmentArgs {
    fn config(&self) -> Result<AugmentConfig> {
        let d = AugmentConfig::default();
        let cfg = AugmentConfig {
            rescale: self.rescale.unwrap_or(d.rescale),
            rotation_range: self.rotation_range.unwrap_or(d.rotation_range),
            width_shift_range: self.width_shift_range.unwrap_or(d.width_shift_range),
            height_shift_range: self.height_shift_range.unwrap_or(d.height_shift_range),
            shear_range: self.shear_range.unwrap_or(d.shear_range),
            zoom_range: self.zoom_range.unwrap_or(d.zoom_range),
            horizontal_flip: self.horizontal_flip.unwrap_or(d.horizontal_flip),
            fill_mode: d.fill_mode,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Deserialize, Default)]
#[serde(default, rename_all = "kebab-case")]
struct TrainArgs {
    /// JSON file with any of these options (kebab-case keys); flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Split file written by `split`.
    #[arg(long)]
    split: Option<PathBuf>,
    /// adagrad, adam, adamax, nadam, rmsprop or sgd [default: adam].
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    beta1: Option<f64>,
    /// [default: 0.999]
    #[arg(long)]
    beta2: Option<f64>,
    /// RMSprop decay [default: 0.9].
    #[arg(long)]
    rho: Option<f64>,
    /// [default: 1e-8]
    #[arg(long)]
    epsilon: Option<f64>,
    /// SGD momentum [default: 0].
    #[arg(long)]
    momentum: Option<f64>,
    /// [default: 50]
    #[arg(long)]
    epochs: Option<usize>,
    /// [default: 32]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization, shuffling, augmentation and dropout [default: 0].
    #[arg(long, env = "STATENET_SEED")]
    seed: Option<u64>,
    /// Write wall_ms = 0 so logs are byte-reproducible [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    deterministic: Option<bool>,
    /// Event log path (JSON Lines).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Checkpoint prefix; writes <prefix>.manifest.json and <prefix>.weights.bin.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Extra checkpoints every N epochs, 0 for none [default: 0].
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Initial weights to load before training.
    #[arg(long)]
    init_weights: Option<PathBuf>,
    /// Accept initial weights that cover only part of the model [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    allow_partial: Option<bool>,
    /// Disable random augmentation of training images (rescale only) [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    no_augment: Option<bool>,
    /// Augment validation images too [default: false].
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    augment_eval: Option<bool>,
    /// Image decoding threads, 0 for all cores [default: 0].
    #[arg(long)]
    workers: Option<usize>,
    /// Memory for caching frozen-layer activations in MiB, 0 to disable [default: 1024].
    #[arg(long)]
    feature_cache_mb: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    augment: AugmentArgs,
}

macro_rules! fill_from {
    ($dst:expr, $src:expr; $($field:ident),* $(,)?) => {
        $( if $dst.$field.is_none() { $dst.$field = $src.$field.take(); } )*
    };
}

impl TrainArgs {
    /// Fills unset flags from the `--config` file.
    fn with_config_file(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let Some(keys) = value.as_object() else {
            bail!("{}: expected a JSON object", path.display());
        };
        let cmd = TrainArgs::augment_args(clap::Command::new("train"));
        let known: BTreeSet<&str> = cmd.get_arguments().filter_map(|a| a.get_long()).collect();
        if let Some(k) = keys.keys().find(|k| *k == "config" || !known.contains(k.as_str())) {
            bail!("{}: unknown option {k:?}", path.display());
        }
        let mut file: TrainArgs =
            serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
        fill_from!(self, file; split, optimizer, lr, beta1, beta2, rho, epsilon, momentum, epochs,
            batch_size, seed, deterministic, events, checkpoint, checkpoint_every, init_weights,
            allow_partial, no_augment, augment_eval, workers, feature_cache_mb);
        fill_from!(self.model, file.model; image_size, base_blocks, frozen_blocks, conv_dropout,
            dense_dropout);
        fill_from!(self.augment, file.augment; rescale, rotation_range, width_shift_range,
            height_shift_range, shear_range, zoom_range, horizontal_flip);
        Ok(self)
    }

    fn train_config(&self) -> Result<TrainConfig> {
        let mut optimizer = OptimizerConfig::new(self.optimizer.unwrap_or(OptimizerKind::Adam));
        optimizer.lr = self.lr.unwrap_or(optimizer.lr);
        optimizer.beta1 = self.beta1.unwrap_or(optimizer.beta1);
        optimizer.beta2 = self.beta2.unwrap_or(optimizer.beta2);
        optimizer.rho = self.rho.unwrap_or(optimizer.rho);
        optimizer.epsilon = self.epsilon.unwrap_or(optimizer.epsilon);
        optimizer.momentum = self.momentum.unwrap_or(optimizer.momentum);
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            optimizer,
            seed: self.seed.unwrap_or(d.seed),
            deterministic: self.deterministic.unwrap_or(d.deterministic),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            augment: self.augment.config()?,
            augment_train: !self.no_augment.unwrap_or(false),
            augment_eval: self.augment_eval.unwrap_or(d.augment_eval),
            event_log: self.events.clone(),
            checkpoint: self.checkpoint.clone(),
            workers: self.workers.unwrap_or(d.workers),
            feature_cache_mb: self.feature_cache_mb.unwrap_or(d.feature_cache_mb),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Options for verbs that run saved weights over a split.
#[derive(Args)]
struct EvalArgs {
    /// Weight prefix written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Split file written by `split`.
    #[arg(long)]
    split: PathBuf,
    /// Which partition to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    which: SplitTag,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Apply random augmentation to the evaluated images.
    #[arg(long)]
    augment_eval: bool,
    /// Seed for augmentation when --augment-eval is set.
    #[arg(long, env = "STATENET_SEED", default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    augment: AugmentArgs,
}

#[derive(Args)]
struct ConfusionArgs {
    #[command(flatten)]
    eval: EvalArgs,
    /// Also write the matrix as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Weight prefix written by `train`.
    #[arg(long)]
    weights: PathBuf,
    /// Pixel scale factor.
    #[arg(long, default_value_t = 1.0 / 255.0)]
    rescale: f64,
    /// Number of classes to print per image, 0 for all.
    #[arg(long, default_value_t = 0)]
    top: usize,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    image: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Resize before augmenting, 0 keeps the original size.
    #[arg(long, default_value_t = 0)]
    image_size: usize,
    #[arg(long, env = "STATENET_SEED", default_value_t = 0)]
    seed: u64,
    /// png or ppm.
    #[arg(long, default_value = "png")]
    format: String,
    #[command(flatten)]
    augment: AugmentArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// loss or accuracy.
    #[arg(long, default_value = "accuracy")]
    metric: Metric,
    /// Smoothing weight in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    smooth: f64,
    /// Which curves to draw: train or val.
    #[arg(long, default_value = "val")]
    split: SplitTag,
    /// Output SVG file.
    #[arg(long)]
    out: PathBuf,
    /// Event logs; each becomes one legend entry named after the file.
    #[arg(required = true)]
    logs: Vec<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Output prefix; prints the manifest to standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Which layers to export: all, base or head.
    #[arg(long, default_value = "all", value_parser = ["all", "base", "head"])]
    only: String,
}

#[derive(Args)]
struct GenShapesArgs {
    /// Output directory (one sub-directory per class).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, env = "STATENET_SEED", default_value_t = 0)]
    seed: u64,
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string(value).expect("serializable"));
}

fn run_split(args: &SplitArgs) -> Result<()> {
    let root = args
        .data
        .canonicalize()
        .with_context(|| format!("dataset root {}", args.data.display()))?;
    let index = data::scan(&root)?;
    for w in &index.warnings {
        warn!("{w}");
    }
    let index = data::split(&index, args.fractions, args.seed)?;
    index.save(&args.out)?;
    print_json(&json!({
        "classes": index.classes.len(),
        "train": index.count(SplitTag::Train),
        "val": index.count(SplitTag::Val),
        "test": index.count(SplitTag::Test),
        "out": args.out,
    }));
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let args = args.with_config_file()?;
    let cfg = args.train_config()?;
    let Some(split) = &args.split else {
        bail!("--split is required (on the command line or in --config)");
    };
    let index = DatasetIndex::load(split)?;
    let spec = args.model.spec(index.classes.len())?;
    let mut model: Model = model::build(&spec, cfg.seed)?;
    if let Some(prefix) = &args.init_weights {
        weights::load_weights(&mut model, prefix, args.allow_partial.unwrap_or(false))?;
    }
    info!(
        "{} parameters, {} train / {} val images",
        model.param_count(),
        index.count(SplitTag::Train),
        index.count(SplitTag::Val)
    );
    let data = Dataset::from_index(index, spec.input.h);
    let summary = trainer::fit(&mut model, &data, &cfg)?;
    let last_train = summary.last(SplitTag::Train).expect("at least one epoch");
    let last_val = summary.last(SplitTag::Val).expect("at least one epoch");
    print_json(&json!({
        "best_val_accuracy": summary.best_val_accuracy,
        "best_epoch": summary.best_epoch,
        "final_train_accuracy": last_train.accuracy,
        "final_val_accuracy": last_val.accuracy,
        "final_train_loss": last_train.loss,
        "final_val_loss": last_val.loss,
    }));
    Ok(())
}

fn load_for_eval(args: &EvalArgs) -> Result<(Model, Dataset, TrainConfig)> {
    let (model, manifest) = weights::load_model(&args.weights, 0)?;
    let index = DatasetIndex::load(&args.split)?;
    if let Some(classes) = &manifest.classes {
        if classes != &index.classes {
            bail!("weights were trained on classes {classes:?} but the split lists {:?}", index.classes);
        }
    }
    let data = Dataset::from_index(index, model.input_shape().h);
    let cfg = TrainConfig {
        batch_size: args.batch_size,
        seed: args.seed,
        augment: args.augment.config()?,
        augment_eval: args.augment_eval,
        ..TrainConfig::default()
    };
    Ok((model, data, cfg))
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let (mut model, data, cfg) = load_for_eval(args)?;
    let mut cache = trainer::FeatureCache::disabled();
    let event = trainer::evaluate(&mut model, &data, args.which, &cfg, 0, &mut cache)?;
    print_json(&json!({
        "split": args.which,
        "count": data.index.count(args.which),
        "loss": event.loss,
        "accuracy": event.accuracy,
    }));
    Ok(())
}

fn run_confusion(args: &ConfusionArgs) -> Result<()> {
    let (mut model, data, cfg) = load_for_eval(&args.eval)?;
    let matrix = metrics::confusion(&mut model, &data, args.eval.which, &cfg)?;
    print!("{}", matrix.to_text());
    if let Some(path) = &args.csv {
        std::fs::write(path, matrix.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let (mut model, manifest) = weights::load_model(&args.weights, 0)?;
    let classes = match manifest.classes {
        Some(c) => c,
        None => (0..model.class_count()?).map(|i| i.to_string()).collect(),
    };
    for path in &args.images {
        let mut ranked = trainer::predict(&mut model, path, &classes, args.rescale)?;
        if args.top > 0 {
            ranked.truncate(args.top);
        }
        let ranking: Vec<_> = ranked
            .iter()
            .map(|(c, p)| json!({"class": c, "probability": p}))
            .collect();
        print_json(&json!({"image": path, "ranking": ranking}));
    }
    Ok(())
}

fn run_preview(args: &PreviewArgs) -> Result<()> {
    let ext = match args.format.as_str() {
        "png" | "ppm" => args.format.as_str(),
        other => bail!("unsupported preview format {other:?} (png, ppm)"),
    };
    let img = if args.image_size > 0 {
        data::load_image(&args.image, args.image_size)?
    } else {
        data::decode_image(&args.image)?
    };
    // keep 0..255 pixels in the written previews
    let cfg = AugmentConfig {
        rescale: 1.0,
        ..args.augment.config()?
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    for i in 0..args.count {
        let mut rng = stream(args.seed, Domain::Preview, &[i as u64]);
        let out = augment_image(&img, &cfg, &mut rng, true)?;
        let path = args.out.join(format!("{stem}_aug{i:03}.{ext}"));
        data::save_image(&out, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn run_plot(args: &PlotArgs) -> Result<()> {
    let series = args
        .logs
        .iter()
        .map(|p| Series::from_log(p, args.metric, args.split))
        .collect::<Result<Vec<_>, _>>()?;
    metrics::plot(&series, args.smooth, &args.out)?;
    println!("{}", args.out.display());
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<()> {
    let Some(out) = &args.out else {
        // manifest only, so partial exports can be inspected too
        let manifest = weights::read_manifest(&args.weights)?;
        print_json(&serde_json::to_value(&manifest)?);
        return Ok(());
    };
    let (model, manifest) = weights::load_model(&args.weights, 0)?;
    let filter: Box<dyn Fn(&statenet_core::layers::Layer) -> bool> = match args.only.as_str() {
        "base" => Box::new(|l| l.block.is_some()),
        "head" => Box::new(|l| l.block.is_none()),
        _ => Box::new(|_| true),
    };
    weights::save_weights_with(
        &model,
        out,
        &SaveOptions {
            spec: manifest.model.as_ref(),
            classes: manifest.classes.as_deref(),
            only: Some(filter.as_ref()),
        },
    )?;
    let (m, b) = weights::container_paths(out);
    println!("{}\n{}", m.display(), b.display());
    Ok(())
}

fn run_gen_shapes(args: &GenShapesArgs) -> Result<()> {
    let n = synth::generate(&args.out, args.per_class, args.size, args.seed)?;
    print_json(&json!({"images": n, "classes": synth::SHAPE_CLASSES.len(), "out": args.out}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split(a) => run_split(&a),
        Command::Train(a) => run_train(*a),
        Command::Eval(a) => run_eval(&a),
        Command::Predict(a) => run_predict(&a),
        Command::AugmentPreview(a) => run_preview(&a),
        Command::Plot(a) => run_plot(&a),
        Command::Confusion(a) => run_confusion(&a),
        Command::ExportWeights(a) => run_export(&a),
        Command::GenShapes(a) => run_gen_shapes(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
