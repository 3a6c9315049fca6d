//! Training procedures: operation-classification pre-training, action
//! recognition fine-tuning, and frozen-backbone probe training.
//!
//! Every source of randomness is derived from the config seeds with tagged
//! streams: epoch shuffles from `(seed, SHUFFLE, epoch)`, training items
//! from `(seed, ITEM, epoch, video_index)`, and the fixed evaluation items
//! from `(eval_seed, EVAL, video_index, repeat)`. Single-threaded runs are
//! bitwise reproducible; the optional multi-threaded mode only parallelizes
//! item assembly (a pure function of its seed) and consumes items in index
//! order, so it produces the same trajectory.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloze::{
    apply_resize_crop, assemble_item, sample_crop_window, ClozeConfig, ClozeError, ClozeItem,
};
use crate::model::{
    load_checkpoint, save_checkpoint, BackboneConfig, Checkpoint, CheckpointError, ClozeHead,
    ClozeNetwork, ModelError, NetGrads, OptimSnapshot, VCP_CLASSES,
};
use crate::rng::{derive_rng, derive_seed, stream};
use crate::tensor::{
    sgd_momentum_step, softmax_cross_entropy, softmax_rows, OptimState, Tensor, TensorError,
};
use crate::video::{clips_to_batch, Clip, Dataset, VideoError, VideoTensor};

/// Evaluation items default to a seed independent of the training seed, so
/// runs with different training seeds are still scored on identical items.
pub const DEFAULT_EVAL_SEED: u64 = 0xE7A1_5EED;

/// Clips sampled per video at prediction time.
pub const PREDICT_CLIPS: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    Config { reason: String },
    #[error("dataset unfit for training: {reason}")]
    Data { reason: String },
    #[error("numeric failure: {reason}")]
    Numeric { reason: String },
    #[error("train log io failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("train log {path} is malformed at line {line}: {reason}")]
    LogFormat {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Cloze(#[from] ClozeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    PretrainVcp,
    FinetuneAction,
    Probe,
}

impl TrainMode {
    fn name(self) -> &'static str {
        match self {
            TrainMode::PretrainVcp => "pretrain_vcp",
            TrainMode::FinetuneAction => "finetune_action",
            TrainMode::Probe => "probe",
        }
    }
}

/// Where the parameters come from. `Checkpoint` means: resume for
/// pre-training, backbone transplant for fine-tuning, frozen backbone for
/// probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Random,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay; 1.0 disables it.
    /// Epoch-indexed (`lr * decay^(epoch-1)`) so a resumed run applies the
    /// same rate at every epoch as an uninterrupted one.
    pub lr_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Seed for the fixed test-time cloze items; independent of `seed` so
    /// different training runs are comparable on identical items.
    pub eval_seed: u64,
    pub init: InitSource,
    /// Forced on in probe mode.
    pub freeze_backbone: bool,
    /// Periodic checkpoint cadence in epochs; 0 writes only at termination.
    pub checkpoint_every: usize,
    /// Test-split evaluation cadence in epochs.
    pub eval_every: usize,
    /// Cloze items assembled per test video for VCP evaluation.
    pub eval_items_per_video: usize,
    /// 0 means: infer from the dataset's labels.
    pub num_action_classes: usize,
    /// Worker threads for item assembly; 1 is fully serial.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain(42)
    }
}

impl TrainConfig {
    /// Pre-training defaults: 300 epochs, batch 8, SGD(0.01, 0.9).
    pub fn pretrain(seed: u64) -> Self {
        Self {
            mode: TrainMode::PretrainVcp,
            epochs: 300,
            batch_size: 8,
            learning_rate: 0.01,
            lr_decay: 1.0,
            momentum: 0.9,
            seed,
            eval_seed: DEFAULT_EVAL_SEED,
            init: InitSource::Random,
            freeze_backbone: false,
            checkpoint_every: 0,
            eval_every: 5,
            eval_items_per_video: 2,
            num_action_classes: 0,
            threads: 1,
        }
    }

    /// Fine-tuning defaults: 150 epochs, otherwise as pre-training.
    pub fn finetune(seed: u64, init: InitSource) -> Self {
        Self {
            mode: TrainMode::FinetuneAction,
            epochs: 150,
            init,
            ..Self::pretrain(seed)
        }
    }

    /// Probe defaults: 30 epochs, frozen backbone, scores every 5 epochs.
    pub fn probe(seed: u64, init: InitSource) -> Self {
        Self {
            mode: TrainMode::Probe,
            epochs: 30,
            init,
            freeze_backbone: true,
            eval_every: 5,
            ..Self::pretrain(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |reason: String| Err(TrainError::Config { reason });
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay {} must lie in (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.eval_every == 0 {
            return fail("eval_every must be positive".into());
        }
        if self.eval_items_per_video == 0 {
            return fail("eval_items_per_video must be positive".into());
        }
        if self.threads == 0 {
            return fail("threads must be positive".into());
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch.saturating_sub(1) as i32)
    }

    fn expect_mode(&self, mode: TrainMode) -> Result<(), TrainError> {
        if self.mode != mode {
            return Err(TrainError::Config {
                reason: format!("config.mode is {} but {} was invoked", self.mode.name(), mode.name()),
            });
        }
        Ok(())
    }
}

/// One epoch of the training log. `wall_time_ms` is informational only and
/// deliberately excluded from serialization: log files must be bitwise
/// identical across equal-seeded runs, and wall clocks never agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_accuracy: Option<Vec<f64>>,
    /// Seed of this epoch's shuffle stream; replaying it re-derives the
    /// epoch's data order.
    pub rng_checkpoint: u64,
    /// Items whose remote option fell back to another operation.
    pub remote_fallbacks: usize,
    /// Hex backbone hash; recorded in probe mode to witness the freeze.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub backbone_hash: Option<String>,
    #[serde(skip)]
    pub wall_time_ms: u64,
}

/// Run description embedded at the top of every log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub train: TrainConfig,
    pub cloze: ClozeConfig,
    pub backbone: BackboneConfig,
    pub num_action_classes: usize,
    pub num_train_videos: usize,
    pub num_test_videos: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub meta: LogMeta,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// JSON lines: the meta object first, then one object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.meta).expect("meta serializes");
        out.push('\n');
        for record in &self.records {
            out.push_str(&serde_json::to_string(record).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<(), TrainError> {
    fs::write(path, log.to_jsonl()).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_train_log(path: &Path) -> Result<TrainLog, TrainError> {
    let io_err = |source| TrainError::Io { path: path.to_path_buf(), source };
    let file = fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let meta_line = match lines.next() {
        Some((_, line)) => line.map_err(io_err)?,
        None => {
            return Err(TrainError::LogFormat {
                path: path.to_path_buf(),
                line: 1,
                reason: "empty file; expected a meta line".into(),
            })
        }
    };
    let parse_err = |line: usize| {
        move |e: serde_json::Error| TrainError::LogFormat {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        }
    };
    let meta: LogMeta = serde_json::from_str(&meta_line).map_err(parse_err(1))?;
    let mut records = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(parse_err(i + 1))?);
    }
    Ok(TrainLog { meta, records })
}

/// Result of a training run: the final state and the epoch-by-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

pub fn periodic_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.ckpt"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("checkpoint_final.ckpt")
}

// ---------------------------------------------------------------------------
// Shared machinery

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs `job` over `(video_index, item_seed)` pairs, optionally on worker
/// threads. Output order always equals input order.
fn map_jobs<T, F>(jobs: &[(usize, u64)], threads: usize, job: F) -> Result<Vec<T>, TrainError>
where
    T: Send,
    F: Fn(usize, u64) -> Result<T, TrainError> + Sync,
{
    let mut out: Vec<Option<Result<T, TrainError>>> = Vec::with_capacity(jobs.len());
    out.resize_with(jobs.len(), || None);
    if threads <= 1 || jobs.len() < 2 {
        for (slot, &(video, seed)) in out.iter_mut().zip(jobs) {
            *slot = Some(job(video, seed));
        }
    } else {
        let chunk = jobs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (job_chunk, out_chunk) in jobs.chunks(chunk).zip(out.chunks_mut(chunk)) {
                let job = &job;
                scope.spawn(move || {
                    for (slot, &(video, seed)) in out_chunk.iter_mut().zip(job_chunk) {
                        *slot = Some(job(video, seed));
                    }
                });
            }
        });
    }
    out.into_iter().map(|slot| slot.expect("every slot filled")).collect()
}

fn assemble_jobs(
    dataset: &Dataset,
    jobs: &[(usize, u64)],
    cloze: &ClozeConfig,
    threads: usize,
) -> Result<Vec<ClozeItem>, TrainError> {
    map_jobs(jobs, threads, |video, seed| {
        assemble_item(dataset.video(video), cloze, seed).map_err(TrainError::from)
    })
}

/// Fixed-seed cloze items over the given videos; identical across epochs.
pub fn build_eval_items(
    dataset: &Dataset,
    video_indices: &[usize],
    cloze: &ClozeConfig,
    eval_seed: u64,
    items_per_video: usize,
    threads: usize,
) -> Result<Vec<ClozeItem>, TrainError> {
    let jobs: Vec<(usize, u64)> = video_indices
        .iter()
        .flat_map(|&video| {
            (0..items_per_video).map(move |rep| {
                (video, derive_seed(eval_seed, &[stream::EVAL, video as u64, rep as u64]))
            })
        })
        .collect();
    assemble_jobs(dataset, &jobs, cloze, threads)
}

fn vcp_batch(items: &[ClozeItem]) -> Result<(Tensor<f32>, Vec<usize>), TrainError> {
    let mut refs: Vec<&Clip> = Vec::new();
    let mut labels = Vec::with_capacity(items.len());
    for item in items {
        refs.extend(item.clips_in_order());
        labels.push(item.label.class_index());
    }
    Ok((clips_to_batch(&refs)?, labels))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> Result<usize, TrainError> {
    let [_, classes] = logits.dims2("count_correct")?;
    Ok(logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count())
}

fn check_finite(loss: f64, what: &str, epoch: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Numeric {
            reason: format!("{what} became non-finite at epoch {epoch}"),
        })
    }
}

/// Loss, overall accuracy, and per-class accuracy (classes with no samples
/// score 0) of a network on fixed cloze items.
#[derive(Debug, Clone, PartialEq)]
pub struct VcpEval {
    pub loss: f64,
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

pub fn evaluate_vcp(
    net: &ClozeNetwork<f32>,
    items: &[ClozeItem],
    batch_size: usize,
    head: ClozeHead,
) -> Result<VcpEval, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Data { reason: "no evaluation items".into() });
    }
    let mut loss_sum = 0.0;
    let mut correct_per_class = vec![0usize; VCP_CLASSES];
    let mut count_per_class = vec![0usize; VCP_CLASSES];
    for batch in items.chunks(batch_size) {
        let (towers, labels) = vcp_batch(batch)?;
        let logits = net.cloze_forward(&towers, head)?;
        let (loss, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += f64::from(loss) * batch.len() as f64;
        let classes = VCP_CLASSES;
        for (row, &label) in logits.data().chunks_exact(classes).zip(&labels) {
            count_per_class[label] += 1;
            if argmax(row) == label {
                correct_per_class[label] += 1;
            }
        }
    }
    let total = items.len();
    let correct: usize = correct_per_class.iter().sum();
    let per_class = correct_per_class
        .iter()
        .zip(&count_per_class)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok(VcpEval {
        loss: loss_sum / total as f64,
        accuracy: correct as f64 / total as f64,
        per_class,
    })
}

fn make_states(net: &ClozeNetwork<f32>, config: &TrainConfig) -> Vec<OptimState<f32>> {
    (0..net.num_params())
        .map(|i| {
            OptimState::new(config.learning_rate as f32, config.momentum as f32, net.param(i))
        })
        .collect()
}

/// Applies the decayed learning rate for `epoch` to every parameter state.
/// Pure in (config, epoch), so resumed runs recompute identical rates.
fn set_epoch_lr(states: &mut [OptimState<f32>], config: &TrainConfig, epoch: usize) {
    let lr = config.learning_rate_at(epoch) as f32;
    for state in states {
        state.learning_rate = lr;
    }
}

fn apply_grads(
    net: &mut ClozeNetwork<f32>,
    grads: NetGrads<f32>,
    states: &mut [OptimState<f32>],
) -> Result<(), TrainError> {
    for (i, grad) in grads.by_param.into_iter().enumerate() {
        if let Some(grad) = grad {
            sgd_momentum_step(net.param_mut(i), &grad, &mut states[i])?;
        }
    }
    Ok(())
}

fn snapshot(
    net: &ClozeNetwork<f32>,
    epoch: usize,
    config: &TrainConfig,
    states: &[OptimState<f32>],
) -> Result<Checkpoint, TrainError> {
    let velocities: Vec<Tensor<f32>> = states.iter().map(|s| s.velocity.clone()).collect();
    let optim = OptimSnapshot {
        learning_rate: config.learning_rate,
        lr_decay: config.lr_decay,
        momentum: config.momentum,
    };
    Ok(net.to_checkpoint(epoch as u64, config.seed, Some((optim, &velocities)))?)
}

fn write_periodic(
    out_dir: Option<&Path>,
    net: &ClozeNetwork<f32>,
    epoch: usize,
    config: &TrainConfig,
    states: &[OptimState<f32>],
) -> Result<(), TrainError> {
    let Some(dir) = out_dir else { return Ok(()) };
    if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 && epoch != config.epochs
    {
        save_checkpoint(&periodic_checkpoint_path(dir, epoch), &snapshot(net, epoch, config, states)?)?;
    }
    Ok(())
}

fn shuffled_train_order(train: &[usize], seed: u64, epoch: usize) -> (Vec<usize>, u64) {
    let shuffle_seed = derive_seed(seed, &[stream::SHUFFLE, epoch as u64]);
    let mut order = train.to_vec();
    order.shuffle(&mut derive_rng(shuffle_seed, &[]));
    (order, shuffle_seed)
}

fn item_jobs(order: &[usize], seed: u64, epoch: usize) -> Vec<(usize, u64)> {
    order
        .iter()
        .map(|&video| (video, derive_seed(seed, &[stream::ITEM, epoch as u64, video as u64])))
        .collect()
}

fn check_span(dataset: &Dataset, indices: &[usize], required: usize, what: &str) -> Result<(), TrainError> {
    if indices.is_empty() {
        return Err(TrainError::Config { reason: format!("{what} split is empty") });
    }
    for &i in indices {
        let video = dataset.video(i);
        if video.frame_count() < required {
            return Err(TrainError::Config {
                reason: format!(
                    "video {} has {} frames; training needs at least {required}",
                    video.video_id(),
                    video.frame_count()
                ),
            });
        }
    }
    Ok(())
}

fn check_backbone_fits(backbone: &BackboneConfig, cloze: &ClozeConfig, dataset: &Dataset) -> Result<(), TrainError> {
    let (c, t, h, w) = backbone.input;
    let channels = dataset.video(0).channels();
    if c != channels {
        return Err(TrainError::Config {
            reason: format!("backbone expects {c} channels, dataset videos have {channels}"),
        });
    }
    if t != cloze.clip_len || (h, w) != cloze.crop {
        return Err(TrainError::Config {
            reason: format!(
                "backbone input ({t}, {h}, {w}) does not match clip_len {} and crop {:?}",
                cloze.clip_len, cloze.crop
            ),
        });
    }
    Ok(())
}

fn resolved_action_classes(dataset: &Dataset, config: &TrainConfig) -> usize {
    if config.num_action_classes > 0 {
        config.num_action_classes
    } else {
        dataset.num_classes().max(1)
    }
}

// ---------------------------------------------------------------------------
// VCP pre-training

/// Trains the backbone and operation head end to end on cloze items.
/// `init: Checkpoint` resumes an interrupted run of the same seed and
/// config; the continued trajectory is bitwise identical to an
/// uninterrupted one.
pub fn pretrain_vcp(
    dataset: &Dataset,
    cloze: &ClozeConfig,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    config.expect_mode(TrainMode::PretrainVcp)?;
    run_vcp_training(dataset, cloze, backbone, config, out_dir, ClozeHead::Vcp)
        .map(|(checkpoint, log)| TrainOutput {
            checkpoint: checkpoint.expect("vcp mode always snapshots"),
            log,
        })
}

/// Shared engine for pre-training (`head_vcp`, backbone training, resume
/// support) and probing (`head_probe`, frozen backbone).
fn run_vcp_training(
    dataset: &Dataset,
    cloze: &ClozeConfig,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    head: ClozeHead,
) -> Result<(Option<Checkpoint>, TrainLog), TrainError> {
    config.validate()?;
    cloze.validate()?;
    backbone.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config { reason: "dataset is empty".into() });
    }
    check_backbone_fits(backbone, cloze, dataset)?;
    let train_indices = dataset.train_indices();
    check_span(dataset, &train_indices, cloze.span(), "train")?;
    let test_indices = dataset.test_indices();

    let probing = head == ClozeHead::Probe;
    let action_classes = resolved_action_classes(dataset, config);
    let mut net = ClozeNetwork::<f32>::init(
        backbone.clone(),
        cloze.clips_per_item,
        action_classes,
        config.seed,
    )?;
    let mut states = make_states(&net, config);
    let mut start_epoch = 0usize;

    match (&config.init, probing) {
        (InitSource::Random, false) => {}
        (InitSource::Random, true) => {
            return Err(TrainError::Config {
                reason: "probe mode requires an init checkpoint".into(),
            });
        }
        (InitSource::Checkpoint(path), true) => {
            // Frozen pretrained backbone; the probe head stays fresh.
            net.load_backbone(&load_checkpoint(path)?)?;
        }
        (InitSource::Checkpoint(path), false) => {
            // Resume: full parameter, optimizer, and epoch restore.
            let ckpt = load_checkpoint(path)?;
            if ckpt.backbone != *backbone {
                return Err(TrainError::Checkpoint(CheckpointError::ConfigMismatch {
                    reason: "resume checkpoint has a different backbone layout".into(),
                }));
            }
            if ckpt.seed != config.seed {
                return Err(TrainError::Config {
                    reason: format!(
                        "resume checkpoint was trained with seed {}, config has {}",
                        ckpt.seed, config.seed
                    ),
                });
            }
            if ckpt.clips_per_item != cloze.clips_per_item {
                return Err(TrainError::Config {
                    reason: format!(
                        "resume checkpoint uses {} clips per item, config has {}",
                        ckpt.clips_per_item, cloze.clips_per_item
                    ),
                });
            }
            let Some(optim) = ckpt.optimizer else {
                return Err(TrainError::Config {
                    reason: "resume checkpoint lacks optimizer state".into(),
                });
            };
            if optim.learning_rate != config.learning_rate
                || optim.lr_decay != config.lr_decay
                || optim.momentum != config.momentum
            {
                return Err(TrainError::Config {
                    reason: format!(
                        "resume checkpoint used SGD(lr {}, decay {}, momentum {}), \
                         config has SGD(lr {}, decay {}, momentum {})",
                        optim.learning_rate,
                        optim.lr_decay,
                        optim.momentum,
                        config.learning_rate,
                        config.lr_decay,
                        config.momentum
                    ),
                });
            }
            net = ClozeNetwork::from_checkpoint(&ckpt)?;
            let velocities = ckpt.velocities(&net.param_names())?;
            for (state, velocity) in states.iter_mut().zip(velocities) {
                state.velocity = velocity;
            }
            start_epoch = ckpt.epoch as usize;
            if start_epoch >= config.epochs {
                return Err(TrainError::Config {
                    reason: format!(
                        "resume checkpoint is already at epoch {start_epoch} of {}",
                        config.epochs
                    ),
                });
            }
        }
    }

    let frozen_hash = probing.then(|| net.backbone_hash());
    let eval_items = if test_indices.is_empty() {
        Vec::new()
    } else {
        build_eval_items(
            dataset,
            &test_indices,
            cloze,
            config.eval_seed,
            config.eval_items_per_video,
            config.threads,
        )?
    };

    let meta = LogMeta {
        train: config.clone(),
        cloze: cloze.clone(),
        backbone: backbone.clone(),
        num_action_classes: action_classes,
        num_train_videos: train_indices.len(),
        num_test_videos: test_indices.len(),
    };
    let mut records = Vec::with_capacity(config.epochs - start_epoch);

    for epoch in start_epoch + 1..=config.epochs {
        let timer = Instant::now();
        set_epoch_lr(&mut states, config, epoch);
        let (order, shuffle_seed) = shuffled_train_order(&train_indices, config.seed, epoch);
        let jobs = item_jobs(&order, config.seed, epoch);
        let items = assemble_jobs(dataset, &jobs, cloze, config.threads)?;
        let remote_fallbacks = items.iter().filter(|i| i.provenance.remote_fallback).count();

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in items.chunks(config.batch_size) {
            let (towers, labels) = vcp_batch(batch)?;
            let (logits, cache) = net.cloze_forward_cached(&towers, head)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
            let loss = f64::from(loss);
            check_finite(loss, "training loss", epoch)?;
            correct += count_correct(&logits, &labels)?;
            loss_sum += loss * batch.len() as f64;
            let grads = net.cloze_backward(&cache, &grad_logits, !probing)?;
            apply_grads(&mut net, grads, &mut states)?;
        }

        let evaluate = !eval_items.is_empty()
            && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let (test_accuracy, per_class_accuracy) = if evaluate {
            let eval = evaluate_vcp(&net, &eval_items, config.batch_size, head)?;
            (Some(eval.accuracy), Some(eval.per_class))
        } else {
            (None, None)
        };

        let mut backbone_hash = None;
        if let Some(expected) = frozen_hash {
            let now = net.backbone_hash();
            if now != expected {
                return Err(TrainError::Numeric {
                    reason: format!("frozen backbone changed during probe epoch {epoch}"),
                });
            }
            backbone_hash = Some(hex(&now));
        }

        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / items.len() as f64,
            train_accuracy: correct as f64 / items.len() as f64,
            test_accuracy,
            per_class_accuracy,
            rng_checkpoint: shuffle_seed,
            remote_fallbacks,
            backbone_hash,
            wall_time_ms: timer.elapsed().as_millis() as u64,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.4}, train acc {:.3}{} ({} ms)",
            config.mode.name(),
            record.train_loss,
            record.train_accuracy,
            record
                .test_accuracy
                .map(|a| format!(", test acc {a:.3}"))
                .unwrap_or_default(),
            record.wall_time_ms
        );
        records.push(record);
        if !probing {
            write_periodic(out_dir, &net, epoch, config, &states)?;
        }
    }

    let log = TrainLog { meta, records };
    let checkpoint = if probing {
        None
    } else {
        let checkpoint = snapshot(&net, config.epochs, config, &states)?;
        if let Some(dir) = out_dir {
            save_checkpoint(&final_checkpoint_path(dir), &checkpoint)?;
        }
        Some(checkpoint)
    };
    Ok((checkpoint, log))
}

// ---------------------------------------------------------------------------
// Action-recognition fine-tuning

/// One randomly placed, randomly cropped clip from a video; the training
/// sample for action recognition.
fn sample_action_clip(
    video: &VideoTensor,
    cloze: &ClozeConfig,
    seed: u64,
) -> Result<Clip, TrainError> {
    let mut rng = derive_rng(seed, &[]);
    if video.frame_count() < cloze.clip_len {
        return Err(TrainError::Cloze(ClozeError::SpanTooShort {
            video_id: video.video_id().to_string(),
            required: cloze.clip_len,
            actual: video.frame_count(),
        }));
    }
    let start = rng.gen_range(0..=video.frame_count() - cloze.clip_len);
    let raw = video.extract_clip(start, cloze.clip_len)?;
    let window = sample_crop_window(cloze, &mut rng);
    Ok(apply_resize_crop(&raw, cloze, window)?)
}

fn video_label(video: &VideoTensor, classes: usize) -> Result<usize, TrainError> {
    let Some(label) = video.class_label() else {
        return Err(TrainError::Data {
            reason: format!("video {} has no class label", video.video_id()),
        });
    };
    let label = label as usize;
    if label >= classes {
        return Err(TrainError::Data {
            reason: format!(
                "video {} has label {label}, but only {classes} classes are configured",
                video.video_id()
            ),
        });
    }
    Ok(label)
}

/// Class distribution for one video: clips at `PREDICT_CLIPS` uniformly
/// spaced starts (fewer when the video is shorter), center-cropped, with
/// the per-clip softmax outputs averaged.
pub fn predict_video(
    video: &VideoTensor,
    net: &ClozeNetwork<f32>,
    cloze: &ClozeConfig,
) -> Result<Vec<f64>, TrainError> {
    if video.frame_count() < cloze.clip_len {
        return Err(TrainError::Cloze(ClozeError::SpanTooShort {
            video_id: video.video_id().to_string(),
            required: cloze.clip_len,
            actual: video.frame_count(),
        }));
    }
    let starts = eval_clip_starts(video.frame_count(), cloze.clip_len, PREDICT_CLIPS);
    let window = ((cloze.resize.0 - cloze.crop.0) / 2, (cloze.resize.1 - cloze.crop.1) / 2);
    let mut clips = Vec::with_capacity(starts.len());
    for start in starts {
        clips.push(apply_resize_crop(&video.extract_clip(start, cloze.clip_len)?, cloze, window)?);
    }
    let refs: Vec<&Clip> = clips.iter().collect();
    let logits = net.action_forward(&clips_to_batch(&refs)?)?;
    let probs = softmax_rows(&logits)?;
    let classes = net.num_action_classes();
    let mut mean = vec![0.0f64; classes];
    for row in probs.data().chunks_exact(classes) {
        for (m, &p) in mean.iter_mut().zip(row) {
            *m += p as f64;
        }
    }
    let n = clips.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

/// Uniformly spaced clip start frames covering `[0, frame_count - clip_len]`,
/// at most `max_clips` of them, always at least one.
pub fn eval_clip_starts(frame_count: usize, clip_len: usize, max_clips: usize) -> Vec<usize> {
    let span = frame_count.saturating_sub(clip_len);
    let n = (span + 1).min(max_clips.max(1));
    if n == 1 {
        return vec![0];
    }
    (0..n)
        .map(|i| ((i * span) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

fn evaluate_action(
    net: &ClozeNetwork<f32>,
    dataset: &Dataset,
    indices: &[usize],
    cloze: &ClozeConfig,
    classes: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut correct_per_class = vec![0usize; classes];
    let mut count_per_class = vec![0usize; classes];
    for &i in indices {
        let video = dataset.video(i);
        let label = video_label(video, classes)?;
        let probs = predict_video(video, net, cloze)?;
        let predicted = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .expect("non-empty distribution");
        count_per_class[label] += 1;
        if predicted == label {
            correct_per_class[label] += 1;
        }
    }
    let correct: usize = correct_per_class.iter().sum();
    let per_class = correct_per_class
        .iter()
        .zip(&count_per_class)
        .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
        .collect();
    Ok((correct as f64 / indices.len() as f64, per_class))
}

/// Trains action recognition, optionally starting from a pretrained
/// backbone. `init: Checkpoint` replaces backbone tensors only; the action
/// head always starts fresh, so runs differ solely in the backbone.
pub fn finetune_action(
    dataset: &Dataset,
    cloze: &ClozeConfig,
    backbone: &BackboneConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    config.expect_mode(TrainMode::FinetuneAction)?;
    config.validate()?;
    cloze.validate()?;
    backbone.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::Config { reason: "dataset is empty".into() });
    }
    check_backbone_fits(backbone, cloze, dataset)?;
    let train_indices = dataset.train_indices();
    check_span(dataset, &train_indices, cloze.clip_len, "train")?;
    let test_indices = dataset.test_indices();

    let classes = resolved_action_classes(dataset, config);
    for &i in train_indices.iter().chain(&test_indices) {
        video_label(dataset.video(i), classes)?;
    }

    let mut net =
        ClozeNetwork::<f32>::init(backbone.clone(), cloze.clips_per_item, classes, config.seed)?;
    if let InitSource::Checkpoint(path) = &config.init {
        net.load_backbone(&load_checkpoint(path)?)?;
    }
    let mut states = make_states(&net, config);

    let meta = LogMeta {
        train: config.clone(),
        cloze: cloze.clone(),
        backbone: backbone.clone(),
        num_action_classes: classes,
        num_train_videos: train_indices.len(),
        num_test_videos: test_indices.len(),
    };
    let mut records = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let timer = Instant::now();
        set_epoch_lr(&mut states, config, epoch);
        let (order, shuffle_seed) = shuffled_train_order(&train_indices, config.seed, epoch);
        let jobs = item_jobs(&order, config.seed, epoch);
        let clips = map_jobs(&jobs, config.threads, |video, seed| {
            sample_action_clip(dataset.video(video), cloze, seed)
        })?;
        let labels: Vec<usize> = order
            .iter()
            .map(|&i| video_label(dataset.video(i), classes))
            .collect::<Result<_, _>>()?;

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (clip_batch, label_batch) in
            clips.chunks(config.batch_size).zip(labels.chunks(config.batch_size))
        {
            let refs: Vec<&Clip> = clip_batch.iter().collect();
            let input = clips_to_batch(&refs)?;
            let (logits, cache) = net.action_forward_cached(&input)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, label_batch)?;
            let loss = f64::from(loss);
            check_finite(loss, "training loss", epoch)?;
            correct += count_correct(&logits, label_batch)?;
            loss_sum += loss * clip_batch.len() as f64;
            let grads = net.action_backward(&cache, &grad_logits, !config.freeze_backbone)?;
            apply_grads(&mut net, grads, &mut states)?;
        }

        let evaluate = !test_indices.is_empty()
            && (epoch % config.eval_every == 0 || epoch == config.epochs);
        let (test_accuracy, per_class_accuracy) = if evaluate {
            let (acc, per_class) = evaluate_action(&net, dataset, &test_indices, cloze, classes)?;
            (Some(acc), Some(per_class))
        } else {
            (None, None)
        };

        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / clips.len() as f64,
            train_accuracy: correct as f64 / clips.len() as f64,
            test_accuracy,
            per_class_accuracy,
            rng_checkpoint: shuffle_seed,
            remote_fallbacks: 0,
            backbone_hash: None,
            wall_time_ms: timer.elapsed().as_millis() as u64,
        };
        log::info!(
            "finetune epoch {epoch}: loss {:.4}, train acc {:.3}{} ({} ms)",
            record.train_loss,
            record.train_accuracy,
            record
                .test_accuracy
                .map(|a| format!(", test acc {a:.3}"))
                .unwrap_or_default(),
            record.wall_time_ms
        );
        records.push(record);
        write_periodic(out_dir, &net, epoch, config, &states)?;
    }

    let checkpoint = snapshot(&net, config.epochs, config, &states)?;
    if let Some(dir) = out_dir {
        save_checkpoint(&final_checkpoint_path(dir), &checkpoint)?;
    }
    Ok(TrainOutput { checkpoint, log: TrainLog { meta, records } })
}

// ---------------------------------------------------------------------------
// Probe training

/// Trains only `head_probe` on cloze items with the backbone loaded from
/// the init checkpoint and held bitwise frozen; per-operation test accuracy
/// is recorded at the eval cadence.
pub fn probe_train(
    dataset: &Dataset,
    cloze: &ClozeConfig,
    backbone: &BackboneConfig,
    config: &TrainConfig,
) -> Result<TrainLog, TrainError> {
    config.expect_mode(TrainMode::Probe)?;
    let mut config = config.clone();
    config.freeze_backbone = true;
    run_vcp_training(dataset, cloze, backbone, &config, None, ClozeHead::Probe)
        .map(|(_, log)| log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StageConfig;
    use crate::video::{synthesize_video, DatasetManifest, ManifestEntry, Split, SyntheticSpec};

    /// In-memory corpus: `per_class` videos per class, last one test split.
    fn tiny_dataset(classes: usize, per_class: usize, frames: usize) -> Dataset {
        let spec = SyntheticSpec {
            num_classes: classes,
            videos_per_class: per_class,
            test_per_class: 1,
            frame_count: frames,
            height: 24,
            width: 32,
            channels: 3,
            object_size: 5,
            seed: 7,
            motion_profiles: Vec::new(),
        };
        let mut entries = Vec::new();
        let mut videos = Vec::new();
        for class in 0..classes {
            for index in 0..per_class {
                let video = synthesize_video(&spec, class, index).unwrap();
                entries.push(ManifestEntry {
                    video_id: video.video_id().to_string(),
                    file_path: format!("{}.vcpv", video.video_id()),
                    class_label: Some(class as u32),
                    frame_count: frames,
                    height: 24,
                    width: 32,
                    split: if index + 1 == per_class { Split::Test } else { Split::Train },
                });
                videos.push(video);
            }
        }
        Dataset::from_videos(DatasetManifest { entries }, videos).unwrap()
    }

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            input: (3, 8, 16, 16),
            stages: vec![
                StageConfig {
                    out_channels: 4,
                    kernel: (3, 3, 3),
                    pool_window: (2, 2, 2),
                    pool_stride: (2, 2, 2),
                },
                StageConfig {
                    out_channels: 8,
                    kernel: (3, 3, 3),
                    pool_window: (2, 2, 2),
                    pool_stride: (2, 2, 2),
                },
            ],
            feature_dim: 8,
        }
    }

    fn quick_config(mode: TrainMode, epochs: usize, seed: u64) -> TrainConfig {
        let mut config = match mode {
            TrainMode::PretrainVcp => TrainConfig::pretrain(seed),
            TrainMode::FinetuneAction => TrainConfig::finetune(seed, InitSource::Random),
            TrainMode::Probe => TrainConfig::probe(seed, InitSource::Random),
        };
        config.epochs = epochs;
        config.eval_every = 2;
        config.eval_items_per_video = 1;
        config
    }

    #[test]
    fn config_validation_names_the_field() {
        let mut config = TrainConfig::pretrain(1);
        config.momentum = 1.0;
        let err = config.validate().unwrap_err().to_string();
        assert!(err.contains("momentum"), "got: {err}");
        let mut config = TrainConfig::pretrain(1);
        config.batch_size = 0;
        assert!(config.validate().unwrap_err().to_string().contains("batch_size"));
        let mut config = TrainConfig::pretrain(1);
        config.lr_decay = 1.5;
        assert!(config.validate().unwrap_err().to_string().contains("lr_decay"));
    }

    #[test]
    fn learning_rate_decays_per_epoch() {
        let mut config = TrainConfig::pretrain(1);
        config.learning_rate = 0.02;
        config.lr_decay = 0.5;
        assert_eq!(config.learning_rate_at(1), 0.02);
        assert_eq!(config.learning_rate_at(2), 0.01);
        assert_eq!(config.learning_rate_at(3), 0.005);
        config.lr_decay = 1.0;
        assert_eq!(config.learning_rate_at(300), 0.02);
    }

    #[test]
    fn clip_starts_cover_the_video_uniformly() {
        assert_eq!(
            eval_clip_starts(64, 8, 10),
            vec![0, 6, 12, 19, 25, 31, 37, 44, 50, 56]
        );
        assert_eq!(eval_clip_starts(12, 8, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(eval_clip_starts(8, 8, 10), vec![0]);
        assert_eq!(eval_clip_starts(200, 8, 2), vec![0, 192]);
    }

    #[test]
    fn fresh_network_loss_is_ln_k() {
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let net = ClozeNetwork::<f32>::init(tiny_backbone(), 3, 2, 42).unwrap();
        let items =
            build_eval_items(&dataset, &dataset.train_indices(), &cloze, 11, 2, 1).unwrap();
        let eval = evaluate_vcp(&net, &items, 8, ClozeHead::Vcp).unwrap();
        let ln5 = (VCP_CLASSES as f64).ln();
        assert!(
            (eval.loss - ln5).abs() < 0.01 * ln5,
            "initial loss {} vs ln 5 = {ln5}",
            eval.loss
        );
        assert!((eval.loss - ln5).abs() < 1e-5);
    }

    #[test]
    fn parallel_assembly_matches_serial() {
        let dataset = tiny_dataset(2, 4, 48);
        let cloze = ClozeConfig::desk_default();
        let jobs: Vec<(usize, u64)> =
            (0..dataset.len()).map(|v| (v, derive_seed(3, &[stream::ITEM, 1, v as u64]))).collect();
        let serial = assemble_jobs(&dataset, &jobs, &cloze, 1).unwrap();
        let parallel = assemble_jobs(&dataset, &jobs, &cloze, 3).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn pretrain_runs_learn_and_log_deterministically() {
        let dataset = tiny_dataset(2, 4, 48);
        let cloze = ClozeConfig::desk_default();
        let config = quick_config(TrainMode::PretrainVcp, 2, 5);
        let a = pretrain_vcp(&dataset, &cloze, &tiny_backbone(), &config, None).unwrap();
        let b = pretrain_vcp(&dataset, &cloze, &tiny_backbone(), &config, None).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log.to_jsonl(), b.log.to_jsonl());

        let epochs: Vec<usize> = a.log.records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 2]);
        for record in &a.log.records {
            assert!(record.train_loss.is_finite());
            assert_eq!(
                record.rng_checkpoint,
                derive_seed(5, &[stream::SHUFFLE, record.epoch as u64])
            );
        }
        // Epoch 2 is on the eval cadence and is also the final epoch.
        let last = a.log.records.last().unwrap();
        assert!(last.test_accuracy.is_some());
        assert_eq!(last.per_class_accuracy.as_ref().unwrap().len(), VCP_CLASSES);
        // A different seed moves the trajectory.
        let config_c = quick_config(TrainMode::PretrainVcp, 2, 6);
        let c = pretrain_vcp(&dataset, &cloze, &tiny_backbone(), &config_c, None).unwrap();
        assert_ne!(a.checkpoint.tensor("backbone.stage0.weights"), c.checkpoint.tensor("backbone.stage0.weights"));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let backbone = tiny_backbone();

        let mut full = quick_config(TrainMode::PretrainVcp, 4, 9);
        full.checkpoint_every = 2;
        let uninterrupted = pretrain_vcp(&dataset, &cloze, &backbone, &full, Some(dir.path())).unwrap();
        let midpoint = periodic_checkpoint_path(dir.path(), 2);
        assert!(midpoint.exists());

        let mut resumed_config = full.clone();
        resumed_config.init = InitSource::Checkpoint(midpoint);
        resumed_config.checkpoint_every = 0;
        let resumed = pretrain_vcp(&dataset, &cloze, &backbone, &resumed_config, None).unwrap();

        assert_eq!(resumed.checkpoint, uninterrupted.checkpoint);
        let tail: Vec<String> = uninterrupted.log.records[2..]
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect();
        let resumed_records: Vec<String> = resumed
            .log
            .records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap())
            .collect();
        assert_eq!(resumed_records, tail);
    }

    #[test]
    fn resume_rejects_mismatched_seed_and_finished_runs() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let backbone = tiny_backbone();
        let mut config = quick_config(TrainMode::PretrainVcp, 2, 9);
        config.checkpoint_every = 1;
        pretrain_vcp(&dataset, &cloze, &backbone, &config, Some(dir.path())).unwrap();

        let mut wrong_seed = config.clone();
        wrong_seed.init = InitSource::Checkpoint(periodic_checkpoint_path(dir.path(), 1));
        wrong_seed.seed = 10;
        let err = pretrain_vcp(&dataset, &cloze, &backbone, &wrong_seed, None).unwrap_err();
        assert!(err.to_string().contains("seed"), "got: {err}");

        let mut finished = config.clone();
        finished.init = InitSource::Checkpoint(final_checkpoint_path(dir.path()));
        let err = pretrain_vcp(&dataset, &cloze, &backbone, &finished, None).unwrap_err();
        assert!(err.to_string().contains("already at epoch"), "got: {err}");

        let mut wrong_decay = config.clone();
        wrong_decay.init = InitSource::Checkpoint(periodic_checkpoint_path(dir.path(), 1));
        wrong_decay.lr_decay = 0.9;
        let err = pretrain_vcp(&dataset, &cloze, &backbone, &wrong_decay, None).unwrap_err();
        assert!(err.to_string().contains("decay"), "got: {err}");
    }

    #[test]
    fn finetune_trains_and_reports_per_class_accuracy() {
        let dataset = tiny_dataset(2, 4, 48);
        let cloze = ClozeConfig::desk_default();
        let config = quick_config(TrainMode::FinetuneAction, 2, 11);
        let out = finetune_action(&dataset, &cloze, &tiny_backbone(), &config, None).unwrap();
        assert_eq!(out.log.meta.num_action_classes, 2);
        let last = out.log.records.last().unwrap();
        assert!(last.test_accuracy.is_some());
        assert_eq!(last.per_class_accuracy.as_ref().unwrap().len(), 2);
        assert_eq!(out.checkpoint.num_action_classes, 2);
    }

    #[test]
    fn finetune_from_checkpoint_transplants_backbone_only() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let backbone = tiny_backbone();
        let pre_config = quick_config(TrainMode::PretrainVcp, 1, 13);
        let pre = pretrain_vcp(&dataset, &cloze, &backbone, &pre_config, Some(dir.path())).unwrap();

        let mut vcp_init = quick_config(TrainMode::FinetuneAction, 1, 14);
        vcp_init.init = InitSource::Checkpoint(final_checkpoint_path(dir.path()));
        // One zero-learning-rate epoch: parameters stay at their starting
        // values, exposing exactly what initialization produced.
        vcp_init.learning_rate = 1e-30;
        let out = finetune_action(&dataset, &cloze, &backbone, &vcp_init, None).unwrap();
        let started = out.checkpoint;
        assert_eq!(
            started.tensor("backbone.stage0.weights"),
            pre.checkpoint.tensor("backbone.stage0.weights"),
            "backbone should come from the checkpoint"
        );
        // The action head started fresh (zeros); one epoch at lr 1e-30
        // cannot move it measurably.
        let head = started.tensor("head_action.weights").unwrap();
        assert!(head.data().iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn finetune_rejects_mismatched_backbone_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let pre_config = quick_config(TrainMode::PretrainVcp, 1, 13);
        pretrain_vcp(&dataset, &cloze, &tiny_backbone(), &pre_config, Some(dir.path())).unwrap();

        let mut other = tiny_backbone();
        other.stages[1].out_channels = 16;
        other.feature_dim = 16;
        let mut config = quick_config(TrainMode::FinetuneAction, 1, 14);
        config.init = InitSource::Checkpoint(final_checkpoint_path(dir.path()));
        let err = finetune_action(&dataset, &cloze, &other, &config, None).unwrap_err();
        assert!(
            matches!(
                err,
                TrainError::Model(ModelError::Checkpoint(CheckpointError::ConfigMismatch { .. }))
            ),
            "got: {err}"
        );
    }

    #[test]
    fn probe_requires_init_and_freezes_the_backbone() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let backbone = tiny_backbone();

        let no_init = quick_config(TrainMode::Probe, 2, 15);
        let err = probe_train(&dataset, &cloze, &backbone, &no_init).unwrap_err();
        assert!(err.to_string().contains("init checkpoint"), "got: {err}");

        let pre_config = quick_config(TrainMode::PretrainVcp, 1, 15);
        let pre = pretrain_vcp(&dataset, &cloze, &backbone, &pre_config, Some(dir.path())).unwrap();
        let mut probe_config = quick_config(TrainMode::Probe, 4, 16);
        probe_config.init = InitSource::Checkpoint(final_checkpoint_path(dir.path()));
        let log = probe_train(&dataset, &cloze, &backbone, &probe_config).unwrap();

        let source = ClozeNetwork::from_checkpoint(&pre.checkpoint).unwrap();
        let expected_hash = hex(&source.backbone_hash());
        assert_eq!(log.records.len(), 4);
        for record in &log.records {
            assert_eq!(record.backbone_hash.as_deref(), Some(expected_hash.as_str()));
        }
        // Eval cadence 2 on 4 epochs: records 2 and 4 carry test scores.
        let scored: Vec<usize> =
            log.records.iter().filter(|r| r.test_accuracy.is_some()).map(|r| r.epoch).collect();
        assert_eq!(scored, vec![2, 4]);
    }

    #[test]
    fn predict_video_returns_a_distribution() {
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let mut net = ClozeNetwork::<f32>::init(tiny_backbone(), 3, 2, 17).unwrap();
        // Give the action head some signal so the distribution is not flat.
        let names = net.param_names();
        let head_idx = names.iter().position(|n| n == "head_action.weights").unwrap();
        for (i, v) in net.param_mut(head_idx).data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.37).sin() * 0.5;
        }
        let probs = predict_video(dataset.video(0), &net, &cloze).unwrap();
        assert_eq!(probs.len(), 2);
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "sum {sum}");

        // A video of exactly one clip length yields a single-clip prediction.
        let spec = tiny_spec_base();
        let short = synthesize_video(&spec, 0, 0).unwrap();
        let single = predict_video(&short, &net, &cloze).unwrap();
        let sum: f64 = single.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);

        let too_short_spec = SyntheticSpec { frame_count: 7, ..spec };
        let too_short = synthesize_video(&too_short_spec, 0, 0).unwrap();
        assert!(matches!(
            predict_video(&too_short, &net, &cloze).unwrap_err(),
            TrainError::Cloze(ClozeError::SpanTooShort { .. })
        ));
    }

    fn tiny_spec_base() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 2,
            videos_per_class: 1,
            test_per_class: 0,
            frame_count: 8,
            height: 24,
            width: 32,
            channels: 3,
            object_size: 5,
            seed: 7,
            motion_profiles: Vec::new(),
        }
    }

    #[test]
    fn short_videos_fail_pretraining_with_a_config_error() {
        let dataset = tiny_dataset(2, 3, 31); // span needs 32 frames
        let cloze = ClozeConfig::desk_default();
        let config = quick_config(TrainMode::PretrainVcp, 1, 19);
        let err = pretrain_vcp(&dataset, &cloze, &tiny_backbone(), &config, None).unwrap_err();
        assert!(matches!(err, TrainError::Config { .. }), "got: {err}");
        assert!(err.to_string().contains("frames"), "got: {err}");
    }

    #[test]
    fn log_roundtrip_and_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let dataset = tiny_dataset(2, 3, 48);
        let cloze = ClozeConfig::desk_default();
        let config = quick_config(TrainMode::PretrainVcp, 2, 21);
        let out = pretrain_vcp(&dataset, &cloze, &tiny_backbone(), &config, None).unwrap();

        let path = dir.path().join("log.jsonl");
        write_train_log(&path, &out.log).unwrap();
        let read = read_train_log(&path).unwrap();
        assert_eq!(read.meta, out.log.meta);
        assert_eq!(read.to_jsonl(), out.log.to_jsonl());

        let mut broken = out.log.to_jsonl();
        broken.push_str("{not json\n");
        fs::write(&path, &broken).unwrap();
        match read_train_log(&path).unwrap_err() {
            TrainError::LogFormat { line, .. } => assert_eq!(line, 4),
            other => panic!("unexpected error {other}"),
        }
    }
}
