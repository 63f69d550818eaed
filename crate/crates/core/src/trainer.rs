//! Training loop, evaluation, prediction and the JSON-Lines event log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::augment::{rescale, AugmentConfig};
use crate::data::{batch_plan, load_batch, load_image, BatchOptions, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::layers::{softmax, softmax_xent};
use crate::model::Model;
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rng::{stream, Domain};
use crate::tensor::Tensor;
use crate::weights::{save_weights_with, SaveOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Record `wall_ms = 0` so event logs are byte-reproducible.
    pub deterministic: bool,
    /// Save a checkpoint every N epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    /// Random augmentation of training images (rescale only when false).
    pub augment_train: bool,
    /// Random augmentation of evaluation images as well.
    pub augment_eval: bool,
    #[serde(skip)]
    pub event_log: Option<PathBuf>,
    /// Checkpoint prefix; see [`crate::weights::container_paths`].
    #[serde(skip)]
    pub checkpoint: Option<PathBuf>,
    /// Image decoding threads (0: rayon default).
    #[serde(skip)]
    pub workers: usize,
    /// Memory budget for caching frozen-prefix activations (0 disables).
    #[serde(skip)]
    pub feature_cache_mb: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::new(OptimizerKind::Adam),
            seed: 0,
            deterministic: false,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            augment_train: true,
            augment_eval: false,
            event_log: None,
            checkpoint: None,
            workers: 0,
            feature_cache_mb: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }
}

/// One per-epoch metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainEvent {
    pub epoch: usize,
    pub split: SplitTag,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: u64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub events: Vec<TrainEvent>,
}

impl RunSummary {
    pub fn last(&self, split: SplitTag) -> Option<&TrainEvent> {
        self.events.iter().rev().find(|e| e.split == split)
    }
}

/// Activations of the model's frozen prefix, computed once per sample.
///
/// Valid only for passes without random augmentation, where a sample's prefix
/// output never changes. The prefix layers are deterministic and compute each
/// sample independently, so cached values are bit-identical to recomputed ones.
pub struct FeatureCache {
    prefix: usize,
    entries: Vec<Option<Tensor>>,
}

impl FeatureCache {
    /// A cache sized for `data`, or a disabled one when the prefix is empty or
    /// the activations would exceed `budget_mb`.
    pub fn new(model: &Model, data: &Dataset, budget_mb: usize) -> Result<Self> {
        let prefix = model.frozen_prefix_len();
        let disabled = Self {
            prefix: 0,
            entries: Vec::new(),
        };
        if prefix == 0 || budget_mb == 0 {
            return Ok(disabled);
        }
        let shapes = model.layer_shapes(1)?;
        let per_sample: usize = shapes[prefix - 1].1.iter().product();
        let bytes = per_sample * 4 * data.len();
        if bytes > budget_mb << 20 {
            info!("feature cache disabled: {} MiB needed", bytes >> 20);
            return Ok(disabled);
        }
        Ok(Self {
            prefix,
            entries: vec![None; data.len()],
        })
    }

    pub fn disabled() -> Self {
        Self {
            prefix: 0,
            entries: Vec::new(),
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix
    }

    /// Model input for `indices` and the layer index at which to continue the forward pass.
    fn inputs(
        &mut self,
        model: &mut Model,
        data: &Dataset,
        indices: &[usize],
        opts: &BatchOptions<'_>,
    ) -> Result<(Tensor, Vec<usize>, usize)> {
        if self.prefix == 0 || opts.augment_images {
            let batch = load_batch(data, indices, opts)?;
            return Ok((batch.x, batch.y, 0));
        }
        let missing: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| self.entries[i].is_none())
            .collect();
        if !missing.is_empty() {
            let batch = load_batch(data, &missing, opts)?;
            let mut unused = stream(0, Domain::Dropout, &[]);
            let feats = model.forward_range(0..self.prefix, &batch.x, false, &mut unused)?;
            let mut shape = feats.shape().to_vec();
            shape[0] = 1;
            for (k, &i) in missing.iter().enumerate() {
                self.entries[i] = Some(Tensor::new(shape.clone(), feats.sample(k).to_vec())?);
            }
        }
        let first = self.entries[indices[0]].as_ref().expect("filled above");
        let mut shape = first.shape().to_vec();
        shape[0] = indices.len();
        let mut x = Vec::with_capacity(first.len() * indices.len());
        for &i in indices {
            x.extend_from_slice(self.entries[i].as_ref().expect("filled above").data());
        }
        let y = indices.iter().map(|&i| data.label(i)).collect();
        Ok((Tensor::new(shape, x)?, y, self.prefix))
    }
}

/// Index of the largest entry, first one on ties.
pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn elapsed_ms(start: Instant, deterministic: bool) -> u64 {
    if deterministic {
        0
    } else {
        start.elapsed().as_millis() as u64
    }
}

fn batch_options<'a>(
    cfg: &'a TrainConfig,
    split: SplitTag,
    training: bool,
    epoch: usize,
    pool: Option<&'a rayon::ThreadPool>,
) -> BatchOptions<'a> {
    BatchOptions {
        split,
        batch_size: cfg.batch_size,
        augment: &cfg.augment,
        augment_images: if training {
            cfg.augment_train
        } else {
            cfg.augment_eval
        },
        shuffle: training,
        seed: cfg.seed,
        epoch,
        pool,
    }
}

/// One pass of forward, backward and optimizer step over the shuffled training split.
pub fn train_epoch(
    model: &mut Model,
    opt: &mut Optimizer,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    cache: &mut FeatureCache,
    pool: Option<&rayon::ThreadPool>,
) -> Result<TrainEvent> {
    let start = Instant::now();
    let opts = batch_options(cfg, SplitTag::Train, true, epoch, pool);
    let plan = batch_plan(data, &opts)?;
    let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
    for (b, indices) in plan.iter().enumerate() {
        let (x, y, start_layer) = cache.inputs(model, data, indices, &opts)?;
        let mut rng = stream(cfg.seed, Domain::Dropout, &[epoch as u64, b as u64]);
        let logits = model.forward_range(start_layer..model.layers.len(), &x, true, &mut rng)?;
        let out = softmax_xent(&logits, &y)?;
        if !out.loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: b });
        }
        model.backward(&out.dlogits)?;
        opt.apply_step(model)?;
        loss_sum += out.loss * y.len() as f64;
        correct += count_correct(&logits, &y);
        seen += y.len();
    }
    Ok(TrainEvent {
        epoch,
        split: SplitTag::Train,
        loss: loss_sum / seen as f64,
        accuracy: correct as f64 / seen as f64,
        wall_ms: elapsed_ms(start, cfg.deterministic),
        lr: cfg.optimizer.lr,
    })
}

/// Inference-mode pass over a split.
pub struct EvalOutcome {
    pub loss_sum: f64,
    pub labels: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl EvalOutcome {
    pub fn accuracy(&self) -> f64 {
        let correct = self
            .labels
            .iter()
            .zip(&self.predicted)
            .filter(|(a, b)| a == b)
            .count();
        correct as f64 / self.labels.len() as f64
    }
}

pub fn run_eval(
    model: &mut Model,
    data: &Dataset,
    split: SplitTag,
    cfg: &TrainConfig,
    epoch: usize,
    cache: &mut FeatureCache,
    pool: Option<&rayon::ThreadPool>,
) -> Result<EvalOutcome> {
    let opts = batch_options(cfg, split, false, epoch, pool);
    let plan = batch_plan(data, &opts)?;
    let mut out = EvalOutcome {
        loss_sum: 0.0,
        labels: Vec::new(),
        predicted: Vec::new(),
    };
    let mut unused = stream(0, Domain::Dropout, &[]);
    for indices in &plan {
        let (x, y, start_layer) = cache.inputs(model, data, indices, &opts)?;
        let logits = model.forward_range(start_layer..model.layers.len(), &x, false, &mut unused)?;
        let xent = softmax_xent(&logits, &y)?;
        out.loss_sum += xent.loss * y.len() as f64;
        let k = logits.shape()[1];
        out.predicted.extend(logits.data().chunks(k).map(argmax));
        out.labels.extend(y);
    }
    model.clear_caches();
    Ok(out)
}

/// Mean loss and accuracy with dropout off; parameters are not touched.
pub fn evaluate(
    model: &mut Model,
    data: &Dataset,
    split: SplitTag,
    cfg: &TrainConfig,
    epoch: usize,
    cache: &mut FeatureCache,
) -> Result<TrainEvent> {
    let start = Instant::now();
    let out = run_eval(model, data, split, cfg, epoch, cache, None)?;
    Ok(TrainEvent {
        epoch,
        split,
        loss: out.loss_sum / out.labels.len() as f64,
        accuracy: out.accuracy(),
        wall_ms: elapsed_ms(start, cfg.deterministic),
        lr: cfg.optimizer.lr,
    })
}

/// First line of an event log: the settings that determine the run.
#[derive(Serialize)]
struct LogHeader<'a> {
    config: HeaderBody<'a>,
}

#[derive(Serialize)]
struct HeaderBody<'a> {
    model: Option<&'a crate::model::ModelSpec>,
    classes: &'a [String],
    train: &'a TrainConfig,
}

struct EventLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EventLog {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn line<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let mut s = serde_json::to_string(record)?;
        s.push('\n');
        self.out
            .write_all(s.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

fn checkpoint(model: &Model, data: &Dataset, prefix: &Path) -> Result<()> {
    save_weights_with(
        model,
        prefix,
        &SaveOptions {
            spec: model.spec.as_ref(),
            classes: Some(&data.index.classes),
            only: None,
        },
    )
}

/// Trains for `cfg.epochs`, evaluating the validation split after every epoch.
pub fn fit(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<RunSummary> {
    cfg.validate()?;
    if data.index.count(SplitTag::Val) == 0 {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let mut log = cfg.event_log.as_deref().map(EventLog::create).transpose()?;
    if let Some(log) = log.as_mut() {
        log.line(&LogHeader {
            config: HeaderBody {
                model: model.spec.as_ref(),
                classes: &data.index.classes,
                train: cfg,
            },
        })?;
    }
    let pool = match cfg.workers {
        0 => None,
        n => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Param(format!("worker pool: {e}")))?,
        ),
    };
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut cache = FeatureCache::new(model, data, cfg.feature_cache_mb)?;
    let mut summary = RunSummary {
        best_val_accuracy: f64::NEG_INFINITY,
        best_epoch: 0,
        events: Vec::with_capacity(2 * cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        let train = train_epoch(model, &mut opt, data, cfg, epoch, &mut cache, pool.as_ref())?;
        let start = Instant::now();
        let outcome = run_eval(model, data, SplitTag::Val, cfg, epoch, &mut cache, pool.as_ref())?;
        let val = TrainEvent {
            epoch,
            split: SplitTag::Val,
            loss: outcome.loss_sum / outcome.labels.len() as f64,
            accuracy: outcome.accuracy(),
            wall_ms: elapsed_ms(start, cfg.deterministic),
            lr: cfg.optimizer.lr,
        };
        info!(
            "epoch {epoch}: train loss {:.4} acc {:.4} | val loss {:.4} acc {:.4}",
            train.loss, train.accuracy, val.loss, val.accuracy
        );
        if val.accuracy > summary.best_val_accuracy {
            summary.best_val_accuracy = val.accuracy;
            summary.best_epoch = epoch;
        }
        if let Some(log) = log.as_mut() {
            log.line(&train)?;
            log.line(&val)?;
        }
        summary.events.push(train);
        summary.events.push(val);
        if let Some(prefix) = &cfg.checkpoint {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                let name = format!("{}-epoch{epoch:04}", prefix.display());
                checkpoint(model, data, Path::new(&name))?;
            }
        }
    }
    if let Some(prefix) = &cfg.checkpoint {
        checkpoint(model, data, prefix)?;
    }
    Ok(summary)
}

/// Reads every event record of a log, skipping header lines.
pub fn read_event_log(path: &Path) -> Result<Vec<TrainEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("config").is_some() {
            continue;
        }
        events.push(serde_json::from_value(value)?);
    }
    Ok(events)
}

/// Class probabilities for one image tensor (`h x w x 3`, values 0..=255), highest first.
pub fn predict_tensor(model: &mut Model, img: &Tensor, classes: &[String], rescale_by: f64) -> Result<Vec<(String, f32)>> {
    let x = rescale(img, rescale_by);
    let shape = x.shape().to_vec();
    let x = x.reshape([1, shape[0], shape[1], shape[2]])?;
    let mut unused = stream(0, Domain::Dropout, &[]);
    let logits = model.forward(&x, false, &mut unused)?;
    model.clear_caches();
    let probs = softmax(&logits)?;
    if probs.len() != classes.len() {
        return Err(Error::Shape(format!(
            "model predicts {} classes but {} names were given",
            probs.len(),
            classes.len()
        )));
    }
    let mut ranked: Vec<(String, f32)> = classes.iter().cloned().zip(probs.data().iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

pub fn predict(model: &mut Model, image_path: &Path, classes: &[String], rescale_by: f64) -> Result<Vec<(String, f32)>> {
    let size = model.input_shape().h;
    let img = load_image(image_path, size)?;
    predict_tensor(model, &img, classes, rescale_by)
}
