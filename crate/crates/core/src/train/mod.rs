//! Training harness: the generator against a frozen segmenter, and the
//! surrogate decoder against a frozen generator.
//!
//! All randomness (epoch order, augmentation, validation hold-out) is a pure
//! function of `(seed, epoch, position)`, so a run stopped after any step
//! and resumed from its checkpoint replays the uninterrupted run.

mod checkpoint;
mod eval;
pub mod optim;
mod surrogate_fit;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_augmenter, AugmentationRecipe, DatasetIndex, DatasetSpec};
use crate::domain::{Image, Mask, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{seg_loss_tensors, LossValue};
use crate::metrics::Confusion;
use crate::nn::Mode;
use crate::params::{snapshot_parameters, ParameterSnapshot};
use crate::prompt_generator::{GeneratorConfig, PromptGenerator};
use crate::segmenter::{build_backend, forward_batch, PromptableSegmenter, SegmenterConfig};
use crate::surrogate::SurrogateConfig;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta, ADAM_M, ADAM_V,
    BUFFER, CHECKPOINT_FORMAT, PARAM,
};
pub use eval::{
    evaluate, evaluate_predictor, evaluate_surrogate, infer, infer_with, load_generator,
    load_surrogate, InferOptions, InferSummary, Predictor,
};
pub use optim::{Adam, AdamConfig};
pub use surrogate_fit::{fit_surrogate, train_surrogate, SurrogateTrainer};

pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

const AUGMENT_SALT: u64 = 0x6175_676d_656e_7400;
const SPLIT_STREAM: u64 = u64::MAX;

/// Random access to training samples.
pub trait SampleProvider {
    fn len(&self) -> usize;

    fn get(&self, i: usize) -> Result<SampleRecord>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleProvider for DatasetIndex {
    fn len(&self) -> usize {
        DatasetIndex::len(self)
    }

    fn get(&self, i: usize) -> Result<SampleRecord> {
        DatasetIndex::get(self, i)
    }
}

impl SampleProvider for [SampleRecord] {
    fn len(&self) -> usize {
        <[SampleRecord]>::len(self)
    }

    fn get(&self, i: usize) -> Result<SampleRecord> {
        Ok(self[i].clone())
    }
}

impl SampleProvider for Vec<SampleRecord> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, i: usize) -> Result<SampleRecord> {
        Ok(self[i].clone())
    }
}

/// A view selecting `positions` of another provider.
pub struct Subset<'a> {
    inner: &'a dyn SampleProvider,
    positions: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(inner: &'a dyn SampleProvider, positions: Vec<usize>) -> Self {
        Self { inner, positions }
    }
}

impl SampleProvider for Subset<'_> {
    fn len(&self) -> usize {
        self.positions.len()
    }

    fn get(&self, i: usize) -> Result<SampleRecord> {
        self.inner.get(self.positions[i])
    }
}

fn default_lr() -> f64 {
    3e-4
}

fn default_weight_decay() -> f64 {
    1e-5
}

fn default_batch_size() -> usize {
    10
}

fn default_max_epochs() -> usize {
    200
}

fn default_val_fraction() -> f64 {
    0.1
}

fn yes() -> bool {
    true
}

/// Every knob of a run. Serialised as TOML for the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Stops after this many optimiser steps, possibly mid-epoch.
    #[serde(default)]
    pub max_steps: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Cosine decay of the learning rate to zero over the planned steps.
    #[serde(default)]
    pub cosine_decay: bool,
    /// Global gradient-norm bound.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Held-out fraction of the training split used for model selection.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "yes")]
    pub augment: bool,
    /// Re-hash the backend after every step instead of every epoch.
    #[serde(default)]
    pub verify_every_step: bool,
    pub backend: SegmenterConfig,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub val_dataset: Option<DatasetSpec>,
    #[serde(default = "GeneratorConfig::hardnet85")]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub surrogate: SurrogateConfig,
    /// Trained generator the surrogate decoder is fitted against.
    #[serde(default)]
    pub generator_checkpoint: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

impl TrainConfig {
    /// Generator recipe: batch 10, 200 epochs.
    pub fn generator_recipe(
        dataset: DatasetSpec,
        backend: SegmenterConfig,
        generator: GeneratorConfig,
        checkpoint_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            max_steps: None,
            seed: 0,
            deterministic: true,
            cosine_decay: false,
            grad_clip: None,
            val_fraction: default_val_fraction(),
            augment: true,
            verify_every_step: false,
            backend,
            dataset,
            val_dataset: None,
            generator,
            surrogate: SurrogateConfig::default(),
            generator_checkpoint: None,
            checkpoint_dir: checkpoint_dir.into(),
            resume_from: None,
        }
    }

    /// Surrogate recipe: batch 24, 60 epochs.
    pub fn surrogate_recipe(
        dataset: DatasetSpec,
        generator_checkpoint: impl Into<PathBuf>,
        checkpoint_dir: impl Into<PathBuf>,
    ) -> Self {
        Self {
            batch_size: 24,
            max_epochs: 60,
            generator_checkpoint: Some(generator_checkpoint.into()),
            ..Self::generator_recipe(
                dataset,
                SegmenterConfig::stub(),
                GeneratorConfig::hardnet85(),
                checkpoint_dir,
            )
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let config: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.generator.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.learning_rate, self.weight_decay)
    }

    fn recipe(&self) -> AugmentationRecipe {
        if self.augment {
            make_augmenter(self.dataset.name)
        } else {
            AugmentationRecipe::identity()
        }
    }
}

/// Position of a run; everything else needed to resume lives in the
/// parameters and optimiser moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub seed: u64,
    /// Current epoch, 0-based.
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub step_in_epoch: usize,
    pub global_step: u64,
    #[serde(default)]
    pub best_val_dice: Option<f64>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            epoch: 0,
            step_in_epoch: 0,
            global_step: 0,
            best_val_dice: None,
        }
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub global_step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub train_bce: f64,
    pub train_dice_loss: f64,
    pub val_dice: f64,
    pub frozen_digest: String,
}

/// Sample order of `epoch`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Augmentation seed of dataset position `position` in `epoch`.
pub fn augmentation_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ AUGMENT_SALT);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng.next_u64()
}

/// `(train, val)` positions; `val` holds `floor(n * fraction)` samples.
pub fn validation_split(seed: u64, n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64) * fraction).floor() as usize;
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Fails unless `dir` exists (or can be created) and accepts new files.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

pub(crate) fn stack_batch(batch: &[SampleRecord], dtype: candle_core::DType, device: &candle_core::Device) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Image> = batch.iter().map(|s| &s.image).collect();
    let masks: Vec<&Mask> = batch.iter().map(|s| &s.mask).collect();
    Ok((Image::stack(&images, dtype, device)?, Mask::stack(&masks, dtype, device)?))
}

pub(crate) fn check_loss(value: &LossValue, step: u64) -> Result<()> {
    if value.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("bce = {}, dice = {}", value.bce, value.dice),
        })
    }
}

/// Mean Dice of thresholded `predictor` output over `data`.
pub fn mean_dice(predictor: &Predictor<'_>, data: &dyn SampleProvider, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut i = 0;
    while i < data.len() {
        let end = (i + batch_size.max(1)).min(data.len());
        let batch = (i..end).map(|j| data.get(j)).collect::<Result<Vec<_>>>()?;
        let (images, _) = stack_batch(&batch, predictor.dtype(), predictor.device())?;
        let logits = predictor.logits(&images)?;
        for (k, sample) in batch.iter().enumerate() {
            let l = logits.get(k)?.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
            let (h, w) = sample.mask.dims();
            // sigmoid(x) >= 0.5 exactly when x >= 0
            let pred = Mask::from_fn(h, w, |y, x| l[y * w + x] >= 0.0);
            total += Confusion::of(&pred, &sample.mask)?.dice();
        }
        i = end;
    }
    Ok(total / data.len() as f64)
}

/// What the epoch loop needs from a model under training.
pub trait Learner {
    fn config(&self) -> &TrainConfig;

    fn state(&self) -> &TrainState;

    fn state_mut(&mut self) -> &mut TrainState;

    fn train_step(&mut self, batch: &[SampleRecord]) -> Result<LossValue>;

    /// Checks the frozen model against its start-of-run snapshot and
    /// returns its digest.
    fn verify_frozen(&self) -> Result<String>;

    fn validation_dice(&self, data: &dyn SampleProvider) -> Result<f64>;

    fn save(&self, path: &Path) -> Result<()>;

    fn current_lr(&self) -> f64;

    fn set_planned_steps(&mut self, steps: u64);
}

pub(crate) fn scheduled_lr(config: &TrainConfig, step: u64, planned: Option<u64>) -> f64 {
    match (config.cosine_decay, planned) {
        (true, Some(total)) if total > 0 => {
            let t = step.min(total) as f64 / total as f64;
            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
        _ => config.learning_rate,
    }
}

/// Epoch loop shared by both trainers. Logs one CSV row per (possibly
/// partial) epoch, keeps the best-by-validation-Dice checkpoint and writes
/// `last.ckpt` after every epoch and `final.ckpt` at the end.
pub fn run_epochs<L: Learner>(
    learner: &mut L,
    train: &dyn SampleProvider,
    val: &dyn SampleProvider,
) -> Result<FitOutcome> {
    let config = learner.config().clone();
    let dir = config.checkpoint_dir.clone();
    ensure_writable(&dir)?;
    let n = train.len();
    if n == 0 {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let bs = config.batch_size;
    let batches = n.div_ceil(bs);
    learner.set_planned_steps(
        config
            .max_steps
            .unwrap_or((config.max_epochs * batches) as u64),
    );
    let recipe = config.recipe();
    let log_path = dir.join(TRAIN_LOG);
    let append = learner.state().global_step > 0 && log_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let mut history = Vec::new();
    let mut best_path = dir.join(BEST_CHECKPOINT).exists().then(|| dir.join(BEST_CHECKPOINT));

    while learner.state().epoch < config.max_epochs {
        let epoch = learner.state().epoch;
        let order = epoch_permutation(config.seed, epoch, n);
        let (mut loss, mut bce, mut dice, mut count) = (0.0, 0.0, 0.0, 0usize);
        let mut stopped = false;
        for b in learner.state().step_in_epoch..batches {
            if config.max_steps.is_some_and(|m| learner.state().global_step >= m) {
                stopped = true;
                break;
            }
            let batch = order[b * bs..((b + 1) * bs).min(n)]
                .iter()
                .map(|&p| {
                    let s = train.get(p)?;
                    if recipe.transforms.is_empty() {
                        return Ok(s);
                    }
                    let (image, mask) =
                        recipe.apply_seeded(&s.image, &s.mask, augmentation_seed(config.seed, epoch, p));
                    SampleRecord::new(image, mask, s.dataset_id, s.frame_index, s.source_path)
                })
                .collect::<Result<Vec<_>>>()?;
            let v = learner.train_step(&batch)?;
            loss += v.total;
            bce += v.bce;
            dice += v.dice;
            count += 1;
            learner.state_mut().step_in_epoch = b + 1;
        }
        let completed = learner.state().step_in_epoch >= batches;
        if count > 0 {
            let frozen_digest = learner.verify_frozen()?;
            let val_dice = learner.validation_dice(val)?;
            let k = count as f64;
            let row = EpochLog {
                epoch,
                global_step: learner.state().global_step,
                lr: learner.current_lr(),
                train_loss: loss / k,
                train_bce: bce / k,
                train_dice_loss: dice / k,
                val_dice,
                frozen_digest,
            };
            log::info!(
                "epoch {epoch} step {}: loss {:.4} val dice {val_dice:.4}",
                row.global_step,
                row.train_loss
            );
            log.serialize(&row)?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            history.push(row);
            if learner.state().best_val_dice.is_none_or(|b| val_dice > b) {
                learner.state_mut().best_val_dice = Some(val_dice);
                let p = dir.join(BEST_CHECKPOINT);
                learner.save(&p)?;
                best_path = Some(p);
            }
        }
        if completed {
            let s = learner.state_mut();
            s.epoch += 1;
            s.step_in_epoch = 0;
        }
        learner.save(&dir.join(LAST_CHECKPOINT))?;
        if stopped || !completed {
            break;
        }
    }
    let final_checkpoint = dir.join(FINAL_CHECKPOINT);
    learner.save(&final_checkpoint)?;
    Ok(FitOutcome {
        state: learner.state().clone(),
        history,
        best_checkpoint: best_path,
        final_checkpoint,
        log_path,
    })
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: TrainState,
    pub history: Vec<EpochLog>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Generator training against a frozen backend.
pub struct Trainer {
    config: TrainConfig,
    g: PromptGenerator,
    backend: Box<dyn PromptableSegmenter>,
    optimizer: Adam,
    state: TrainState,
    backend_snapshot: ParameterSnapshot,
    planned_steps: Option<u64>,
}

impl Trainer {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let g = PromptGenerator::build(&config.generator)?;
        let backend = build_backend(&config.backend)?;
        Self::from_parts(config, g, backend)
    }

    pub fn from_parts(
        config: &TrainConfig,
        g: PromptGenerator,
        backend: Box<dyn PromptableSegmenter>,
    ) -> Result<Self> {
        let vars = g.store().params().map(|(k, v)| (k.clone(), v.clone())).collect();
        let optimizer = Adam::new(vars, config.adam())?;
        let backend_snapshot = snapshot_parameters(backend.as_ref())?;
        Ok(Self {
            config: config.clone(),
            g,
            backend,
            optimizer,
            state: TrainState::new(config.seed),
            backend_snapshot,
            planned_steps: None,
        })
    }

    /// Restores weights, optimiser moments and position from a generator
    /// checkpoint. The backend must hash to the digest recorded in it.
    pub fn resume(config: &TrainConfig, path: &Path) -> Result<Self> {
        let backend = build_backend(&config.backend)?;
        Self::resume_with_backend(config, path, backend)
    }

    pub fn resume_with_backend(
        config: &TrainConfig,
        path: &Path,
        backend: Box<dyn PromptableSegmenter>,
    ) -> Result<Self> {
        let (g, ck) = load_generator(path)?;
        if ck.meta.generator != config.generator {
            log::warn!("resuming with the generator configuration stored in {}", path.display());
        }
        let mut trainer = Self::from_parts(config, g, backend)?;
        if let Some(d) = &ck.meta.backend_digest {
            if *d != trainer.backend_snapshot.global_checksum {
                return Err(Error::Checkpoint(format!(
                    "{} was trained against backend {d}, not {}",
                    path.display(),
                    trainer.backend_snapshot.global_checksum
                )));
            }
        }
        trainer
            .optimizer
            .set_moments(&ck.section(ADAM_M), &ck.section(ADAM_V))?;
        trainer.optimizer.set_step_count(ck.meta.state.global_step);
        trainer.state = ck.meta.state;
        Ok(trainer)
    }

    pub fn generator(&self) -> &PromptGenerator {
        &self.g
    }

    pub fn backend(&self) -> &dyn PromptableSegmenter {
        self.backend.as_ref()
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    pub fn backend_snapshot(&self) -> &ParameterSnapshot {
        &self.backend_snapshot
    }

    pub fn predictor(&self) -> Predictor<'_> {
        Predictor::Composed {
            backend: self.backend.as_ref(),
            g: &self.g,
        }
    }

    /// Snapshot of the backend compared with the one taken at start.
    pub fn verify_backend(&self) -> Result<ParameterSnapshot> {
        let now = snapshot_parameters(self.backend.as_ref())?;
        if now.global_checksum != self.backend_snapshot.global_checksum {
            return Err(Error::InvariantViolation(format!(
                "frozen backend changed: {:?}",
                now.changed_entries(&self.backend_snapshot)
            )));
        }
        Ok(now)
    }

    /// Metadata describing the current weights.
    pub fn checkpoint_meta(&self) -> Result<CheckpointMeta> {
        Ok(CheckpointMeta {
            kind: CheckpointKind::Generator,
            generator: self.g.config().clone(),
            surrogate: None,
            state: self.state.clone(),
            backend_digest: Some(self.backend_snapshot.global_checksum.clone()),
            generator_digest: snapshot_parameters(&self.g)?.global_checksum,
            input_size: Some(self.config.dataset.resize()),
        })
    }
}

impl Learner for Trainer {
    fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn state(&self) -> &TrainState {
        &self.state
    }

    fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    /// One Adam step of `g` on `seg_loss(S(I, g(I)), M)`.
    fn train_step(&mut self, batch: &[SampleRecord]) -> Result<LossValue> {
        let store = self.g.store();
        let (images, masks) = stack_batch(batch, store.dtype(), store.device())?;
        let out = forward_batch(self.backend.as_ref(), &self.g, &images, Mode::Train)?;
        let logits = out.upsampled()?;
        let loss = seg_loss_tensors(&logits, &masks.to_dtype(logits.dtype())?)?;
        let value = loss.value()?;
        let step = self.state.global_step + 1;
        check_loss(&value, step)?;
        let mut grads = loss.total.backward()?;
        if let Some(c) = self.config.grad_clip {
            self.optimizer.clip_grad_norm(&mut grads, c)?;
        }
        self.optimizer
            .set_lr(scheduled_lr(&self.config, self.state.global_step, self.planned_steps));
        self.optimizer.step(&grads)?;
        self.state.global_step = step;
        if self.config.verify_every_step {
            self.verify_backend()?;
        }
        Ok(value)
    }

    fn verify_frozen(&self) -> Result<String> {
        Ok(self.verify_backend()?.global_checksum)
    }

    fn validation_dice(&self, data: &dyn SampleProvider) -> Result<f64> {
        mean_dice(&self.predictor(), data, self.config.batch_size)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let (m, v) = self.optimizer.moments();
        let store = self.g.store();
        let params = store.params().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        let buffers = store.buffers().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        save_checkpoint(
            path,
            &self.checkpoint_meta()?,
            &[(PARAM, params), (BUFFER, buffers), (ADAM_M, m), (ADAM_V, v)],
        )
    }

    fn current_lr(&self) -> f64 {
        scheduled_lr(&self.config, self.state.global_step, self.planned_steps)
    }

    fn set_planned_steps(&mut self, steps: u64) {
        self.planned_steps = Some(steps);
    }
}

/// Free-function form of [`Learner::train_step`].
pub fn train_step(trainer: &mut Trainer, batch: &[SampleRecord]) -> Result<LossValue> {
    trainer.train_step(batch)
}

/// Training and validation providers for a run.
pub fn split_datasets(config: &TrainConfig) -> Result<(DatasetIndex, Vec<usize>, Option<DatasetIndex>, Vec<usize>)> {
    let index = DatasetIndex::build(&config.dataset)?;
    if let Some(spec) = &config.val_dataset {
        let val = DatasetIndex::build(spec)?;
        let all = (0..index.len()).collect();
        let val_all = (0..val.len()).collect();
        return Ok((index, all, Some(val), val_all));
    }
    let (train, val) = validation_split(config.seed, index.len(), config.val_fraction);
    if val.is_empty() || train.is_empty() {
        log::info!("no validation hold-out for {} samples; validating on the training split", index.len());
        let all: Vec<usize> = (0..index.len()).collect();
        return Ok((index, all.clone(), None, all));
    }
    Ok((index, train, None, val))
}

/// Full generator run described by `config`.
pub fn fit(config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    ensure_writable(&config.checkpoint_dir)?;
    let (index, train_pos, val_index, val_pos) = split_datasets(config)?;
    let mut trainer = match &config.resume_from {
        Some(p) => Trainer::resume(config, p)?,
        None => Trainer::new(config)?,
    };
    let train = Subset::new(&index, train_pos);
    let val = Subset::new(val_index.as_ref().unwrap_or(&index), val_pos);
    run_epochs(&mut trainer, &train, &val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;

    fn tiny_config(dir: &Path) -> TrainConfig {
        let mut c = TrainConfig::generator_recipe(
            DatasetSpec::synthetic_blobs(4, 1),
            SegmenterConfig::stub(),
            GeneratorConfig::tiny_test(),
            dir,
        );
        c.batch_size = 2;
        c
    }

    #[test]
    fn permutation_is_seeded_and_complete() {
        let a = epoch_permutation(3, 1, 10);
        assert_eq!(a, epoch_permutation(3, 1, 10));
        assert_ne!(a, epoch_permutation(3, 2, 10));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_sizes() {
        let (t, v) = validation_split(0, 85, 0.1);
        assert_eq!((t.len(), v.len()), (77, 8));
        let (t, v) = validation_split(0, 4, 0.1);
        assert_eq!((t.len(), v.len()), (4, 0));
    }

    #[test]
    fn config_toml_roundtrip_and_defaults() {
        let c = tiny_config(Path::new("/tmp/x"));
        let back = TrainConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(c, back);
        let minimal = r#"
            checkpoint_dir = "runs/a"
            [backend]
            kind = "frozen-stub"
            input_resolution = 64
            [dataset]
            name = "glas"
            root_dir = "/data/glas"
            split = "train"
        "#;
        let c = TrainConfig::from_toml_str(minimal).unwrap();
        assert_eq!(c.learning_rate, 3e-4);
        assert_eq!(c.weight_decay, 1e-5);
        assert_eq!(c.batch_size, 10);
        assert_eq!(c.max_epochs, 200);
        assert!(!c.cosine_decay);
        assert_eq!(c.generator.encoder_block_channels, vec![192, 256, 320, 480, 720, 1280]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_config(Path::new("/tmp/x"));
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config(Path::new("/tmp/x"));
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_generator_and_backend() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.learning_rate = 1e-9;
        let mut t = Trainer::new(&config).unwrap();
        t.optimizer.set_lr(0.0);
        t.config.learning_rate = 0.0;
        let before = snapshot_parameters(t.generator()).unwrap();
        let batch = synthetic::blobs(2, 1, 64).unwrap();
        t.train_step(&batch).unwrap();
        assert_eq!(before, snapshot_parameters(t.generator()).unwrap());
        t.verify_backend().unwrap();
    }

    #[test]
    fn unwritable_checkpoint_dir_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        let config = tiny_config(&file.join("sub"));
        assert!(matches!(fit(&config), Err(Error::Io { .. })));
    }

    #[test]
    fn short_fit_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.max_epochs = 2;
        let out = fit(&config).unwrap();
        assert_eq!(out.state.global_step, 4);
        assert_eq!(out.history.len(), 2);
        assert!(out.final_checkpoint.exists());
        assert!(out.best_checkpoint.unwrap().exists());
        let log = std::fs::read_to_string(out.log_path).unwrap();
        assert!(log.starts_with("epoch,global_step,lr,train_loss"));
        assert_eq!(log.lines().count(), 3);
    }
}
