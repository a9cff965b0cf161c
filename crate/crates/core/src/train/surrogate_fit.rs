//! Fitting the surrogate decoder on a frozen generator.

use std::path::Path;

use super::checkpoint::{save_checkpoint, CheckpointKind, CheckpointMeta, ADAM_M, ADAM_V, PARAM};
use super::eval::{load_generator, Predictor};
use super::{
    check_loss, ensure_writable, mean_dice, run_epochs, scheduled_lr, split_datasets, stack_batch, Adam,
    FitOutcome, Learner, SampleProvider, Subset, TrainConfig, TrainState,
};
use crate::domain::SampleRecord;
use crate::error::{Error, Result};
use crate::losses::{seg_loss_tensors, LossValue};
use crate::nn::{resize_bilinear, Mode};
use crate::params::{snapshot_parameters, ParameterSnapshot};
use crate::prompt_generator::PromptGenerator;
use crate::surrogate::SurrogateDecoder;

pub struct SurrogateTrainer<'g> {
    config: TrainConfig,
    g: &'g PromptGenerator,
    h: SurrogateDecoder,
    optimizer: Adam,
    state: TrainState,
    g_snapshot: ParameterSnapshot,
    planned_steps: Option<u64>,
}

impl<'g> SurrogateTrainer<'g> {
    pub fn new(config: &TrainConfig, g: &'g PromptGenerator, h: SurrogateDecoder) -> Result<Self> {
        let vars = h.store().params().map(|(k, v)| (k.clone(), v.clone())).collect();
        Ok(Self {
            optimizer: Adam::new(vars, config.adam())?,
            config: config.clone(),
            g,
            h,
            state: TrainState::new(config.seed),
            g_snapshot: snapshot_parameters(g)?,
            planned_steps: None,
        })
    }

    pub fn decoder(&self) -> &SurrogateDecoder {
        &self.h
    }

    pub fn into_decoder(self) -> SurrogateDecoder {
        self.h
    }

    pub fn generator_snapshot(&self) -> &ParameterSnapshot {
        &self.g_snapshot
    }

    pub fn verify_generator(&self) -> Result<ParameterSnapshot> {
        let now = snapshot_parameters(self.g)?;
        if now.global_checksum != self.g_snapshot.global_checksum {
            return Err(Error::InvariantViolation(format!(
                "frozen generator changed during surrogate training: {:?}",
                now.changed_entries(&self.g_snapshot)
            )));
        }
        Ok(now)
    }
}

impl Learner for SurrogateTrainer<'_> {
    fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn state(&self) -> &TrainState {
        &self.state
    }

    fn state_mut(&mut self) -> &mut TrainState {
        &mut self.state
    }

    fn train_step(&mut self, batch: &[SampleRecord]) -> Result<LossValue> {
        let store = self.g.store();
        let (images, masks) = stack_batch(batch, store.dtype(), store.device())?;
        let (_, _, height, width) = images.dims4()?;
        let z = self.g.forward(&images, Mode::Eval)?.detach();
        let logits = resize_bilinear(&self.h.forward(&z)?, height, width)?;
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
            self.verify_generator()?;
        }
        Ok(value)
    }

    fn verify_frozen(&self) -> Result<String> {
        Ok(self.verify_generator()?.global_checksum)
    }

    fn validation_dice(&self, data: &dyn SampleProvider) -> Result<f64> {
        mean_dice(&Predictor::Surrogate { g: self.g, h: &self.h }, data, self.config.batch_size)
    }

    fn save(&self, path: &Path) -> Result<()> {
        let (m, v) = self.optimizer.moments();
        let params = self.h.store().params().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        let meta = CheckpointMeta {
            kind: CheckpointKind::Surrogate,
            generator: self.g.config().clone(),
            surrogate: Some(self.h.config().clone()),
            state: self.state.clone(),
            backend_digest: None,
            generator_digest: self.g_snapshot.global_checksum.clone(),
            input_size: Some(self.config.dataset.resize()),
        };
        save_checkpoint(path, &meta, &[(PARAM, params), (ADAM_M, m), (ADAM_V, v)])
    }

    fn current_lr(&self) -> f64 {
        scheduled_lr(&self.config, self.state.global_step, self.planned_steps)
    }

    fn set_planned_steps(&mut self, steps: u64) {
        self.planned_steps = Some(steps);
    }
}

/// Trains `h` on `h(g(I))` against the masks; `g` stays frozen, which is
/// checked by snapshot at every epoch boundary.
pub fn train_surrogate(
    h: SurrogateDecoder,
    frozen_g: &PromptGenerator,
    train: &dyn SampleProvider,
    val: &dyn SampleProvider,
    config: &TrainConfig,
) -> Result<(SurrogateDecoder, FitOutcome)> {
    let mut trainer = SurrogateTrainer::new(config, frozen_g, h)?;
    let outcome = run_epochs(&mut trainer, train, val)?;
    trainer.verify_generator()?;
    Ok((trainer.into_decoder(), outcome))
}

/// Full surrogate run: loads `config.generator_checkpoint` and fits a fresh
/// decoder built from `config.surrogate`.
pub fn fit_surrogate(config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    ensure_writable(&config.checkpoint_dir)?;
    let path = config
        .generator_checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("train-surrogate needs generator_checkpoint".into()))?;
    let (g, _) = load_generator(path)?;
    let (index, train_pos, val_index, val_pos) = split_datasets(config)?;
    let h = SurrogateDecoder::new(&config.surrogate)?;
    let train = Subset::new(&index, train_pos);
    let val = Subset::new(val_index.as_ref().unwrap_or(&index), val_pos);
    Ok(train_surrogate(h, &g, &train, &val, config)?.1)
}
