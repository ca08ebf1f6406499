//! Pre-training on streams of freshly sampled synthetic tasks.

mod optim;

pub use optim::{adamw_step, clip_global_norm, global_norm, AdamWConfig, OptimizerState, StepOutcome};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{Checkpoint, TrainingPosition};
use crate::model::{
    forward, forward_on_tape, restricted_softmax, ForwardMode, ModelConfig, ModelError, ModelParams, PreparedTask,
};
use crate::numerics::{NumericsError, Real, Tape, Tensor, Var};
use crate::prior::{PriorError, TaskSampler};
use crate::rng::{derive_seed, task_seed};

/// Seed branch reserved for the validation pool.
const VALIDATION_BRANCH: u64 = u64::MAX;
/// Seed branch for replacement tasks after a non-finite loss.
const RETRY_BRANCH: u64 = u64::MAX - 1;
/// Replacement draws per batch slot before a step fails.
pub const NONFINITE_RETRIES: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("task loss needs at least one labeled query node")]
    EmptyTestSet,
    #[error("non-finite loss at step {step} after {retries} replacement tasks")]
    NonFiniteLoss { step: u64, retries: u64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup, then cosine decay to zero.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub steps_per_epoch: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub schedule: LrSchedule,
    /// Defaults to 2% of all steps.
    pub warmup_steps: Option<u64>,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub validation_tasks: usize,
    /// Steps between validation passes; 0 disables them.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 1024,
            batch_size: 8,
            learning_rate: 1e-4,
            optimizer: AdamWConfig::default(),
            schedule: LrSchedule::Cosine,
            warmup_steps: None,
            grad_clip: 1.0,
            seed: 0,
            checkpoint_every: 1024,
            validation_tasks: 256,
            validate_every: 1024,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return err("epochs, steps_per_epoch and batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate must be finite and non-negative");
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return err("optimizer hyperparameters out of range");
        }
        if self.grad_clip <= 0.0 {
            return err("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs * self.steps_per_epoch
    }

    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or_else(|| (self.total_steps() as f64 * 0.02).ceil() as u64)
    }

    /// Learning rate for the update with zero-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let base = self.learning_rate;
        match self.schedule {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let (w, total) = (self.warmup(), self.total_steps());
                if step < w {
                    base * (step + 1) as f64 / w as f64
                } else if total <= w {
                    base
                } else {
                    let t = ((step - w) as f64 / (total - w) as f64).min(1.0);
                    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }
}

/// Mean cross-entropy of the class-restricted softmax against query labels.
pub fn task_loss(tape: &mut Tape, logits: Var, n_classes: usize, labels: &[usize]) -> Result<Var, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let restricted = tape.slice_cols(logits, 0, n_classes)?;
    Ok(tape.softmax_cross_entropy(restricted, labels)?)
}

/// `−mean log p[label]` with log-probabilities clamped below at `ln 1e-12`.
pub fn mean_nll(probs: &Tensor, labels: &[usize]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let floor = 1e-12f64.ln();
    let total: f64 = labels.iter().enumerate().map(|(r, &c)| -(probs.get(r, c) as f64).ln().max(floor)).sum();
    Ok(total / labels.len() as f64)
}

fn labels_of(task: &PreparedTask) -> Result<&[usize], TrainError> {
    match task.test_labels.as_deref() {
        Some(l) if !l.is_empty() => Ok(l),
        _ => Err(TrainError::EmptyTestSet),
    }
}

/// Loss value and parameter gradients for one task.
pub fn task_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    task: &PreparedTask,
    mode: ForwardMode,
) -> Result<(f64, ModelParams), TrainError> {
    let labels = labels_of(task)?;
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let logits = forward_on_tape(&mut tape, &vars, task, cfg, mode)?;
    let loss = task_loss(&mut tape, logits, task.n_classes, labels)?;
    let value = tape.value(loss).data()[0] as f64;
    let grads = tape.backward(loss)?;
    Ok((value, vars.map(|_, v| grads.get(*v))))
}

/// Inference-mode loss of one task.
pub fn task_loss_value(params: &ModelParams, cfg: &ModelConfig, task: &PreparedTask) -> Result<f64, TrainError> {
    let labels = labels_of(task)?;
    let probs = restricted_softmax(&forward(params, task, cfg)?, task.n_classes)?;
    mean_nll(&probs, labels)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Number of completed steps.
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    /// Mean batch loss over the current epoch so far.
    pub running_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    /// Seconds since the trainer was created.
    pub wallclock: f64,
}

/// Owns the parameters, optimizer state and data-order position.
pub struct Trainer<S: TaskSampler> {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub sampler: S,
    pub params: ModelParams,
    pub opt: OptimizerState,
    pub position: TrainingPosition,
    epoch_loss_sum: f64,
    validation: Vec<PreparedTask>,
    started: Instant,
}

impl<S: TaskSampler> Trainer<S> {
    pub fn new(model_cfg: ModelConfig, train_cfg: TrainConfig, sampler: S) -> Result<Self, TrainError> {
        let params = ModelParams::init(&model_cfg)?;
        Self::with_params(model_cfg, train_cfg, sampler, params)
    }

    pub fn with_params(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        sampler: S,
        params: ModelParams,
    ) -> Result<Self, TrainError> {
        train_cfg.validate()?;
        params.check_against(&model_cfg)?;
        let opt = OptimizerState::new(&params);
        let position = TrainingPosition { seed: train_cfg.seed, epoch: 0, step_in_epoch: 0, global_step: 0, epoch_loss_sum: 0.0 };
        let mut t = Self {
            model_cfg,
            train_cfg,
            sampler,
            params,
            opt,
            position,
            epoch_loss_sum: 0.0,
            validation: Vec::new(),
            started: Instant::now(),
        };
        t.validation = t.build_validation_pool()?;
        Ok(t)
    }

    /// Continues from a checkpoint that carries optimizer state and position.
    pub fn resume(ckpt: &Checkpoint, train_cfg: TrainConfig, sampler: S) -> Result<Self, TrainError> {
        let (Some(opt), Some(pos)) = (&ckpt.optimizer, &ckpt.position) else {
            return Err(TrainError::Checkpoint("checkpoint has no optimizer state or training position".into()));
        };
        if pos.seed != train_cfg.seed {
            return Err(TrainError::Checkpoint(format!("seed {} differs from checkpoint seed {}", train_cfg.seed, pos.seed)));
        }
        if !opt.check_against(&ckpt.model_config) {
            return Err(TrainError::Checkpoint("optimizer state does not match the model layout".into()));
        }
        let mut t = Self::with_params(ckpt.model_config.clone(), train_cfg, sampler, ckpt.params.clone())?;
        t.opt = opt.clone();
        t.position = pos.clone();
        t.epoch_loss_sum = pos.epoch_loss_sum;
        Ok(t)
    }

    fn build_validation_pool(&self) -> Result<Vec<PreparedTask>, TrainError> {
        let seed = self.train_cfg.seed;
        (0..self.train_cfg.validation_tasks as u64)
            .into_par_iter()
            .map(|i| {
                let task = self.sampler.sample_task(derive_seed(&[seed, VALIDATION_BRANCH, i]))?;
                Ok(PreparedTask::from_task(&task, &self.model_cfg)?)
            })
            .collect()
    }

    pub fn validation_pool(&self) -> &[PreparedTask] {
        &self.validation
    }

    /// Mean inference-mode loss over the validation pool.
    pub fn validation_loss(&self) -> Result<f64, TrainError> {
        if self.validation.is_empty() {
            return Ok(f64::NAN);
        }
        let losses: Vec<f64> = self
            .validation
            .par_iter()
            .map(|t| task_loss_value(&self.params, &self.model_cfg, t))
            .collect::<Result<_, _>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn is_finished(&self) -> bool {
        self.position.global_step >= self.train_cfg.total_steps()
    }

    fn slot_gradients(&self, slot: u64) -> Result<(f64, ModelParams), TrainError> {
        let pos = &self.position;
        let base = task_seed(pos.seed, pos.epoch, pos.step_in_epoch, slot);
        let mode = ForwardMode::Train { seed: derive_seed(&[base, 1]) };
        for retry in 0..=NONFINITE_RETRIES {
            let seed = if retry == 0 { base } else { derive_seed(&[base, RETRY_BRANCH, retry]) };
            let task = PreparedTask::from_task(&self.sampler.sample_task(seed)?, &self.model_cfg)?;
            match task_gradients(&self.params, &self.model_cfg, &task, mode) {
                Ok((loss, g)) if loss.is_finite() => return Ok((loss, g)),
                Ok(_) | Err(TrainError::Numerics(NumericsError::NonFinite { .. })) => continue,
                Err(TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(TrainError::NonFiniteLoss { step: pos.global_step, retries: NONFINITE_RETRIES })
    }

    /// Samples one batch, averages task gradients, clips and applies AdamW.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let results: Vec<(f64, ModelParams)> = (0..self.train_cfg.batch_size as u64)
            .into_par_iter()
            .map(|slot| self.slot_gradients(slot))
            .collect::<Result<_, _>>()?;
        let inv = 1.0 / results.len() as f64;
        let mut iter = results.into_iter();
        let (mut loss, mut grads) = iter.next().expect("batch is non-empty");
        for (l, g) in iter {
            loss += l;
            for (acc, x) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
            }
        }
        loss *= inv;
        for g in grads.tensors_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv as Real);
        }
        let grad_norm = clip_global_norm(&mut grads, self.train_cfg.grad_clip);
        let lr = self.train_cfg.lr_at(self.position.global_step);
        let outcome = adamw_step(&mut self.params, &grads, &mut self.opt, &self.train_cfg.optimizer, lr);

        self.epoch_loss_sum += loss;
        let running_loss = self.epoch_loss_sum / (self.position.step_in_epoch + 1) as f64;
        let epoch = self.position.epoch;
        self.position.global_step += 1;
        self.position.step_in_epoch += 1;
        if self.position.step_in_epoch == self.train_cfg.steps_per_epoch {
            self.position.epoch += 1;
            self.position.step_in_epoch = 0;
            self.epoch_loss_sum = 0.0;
        }
        self.position.epoch_loss_sum = self.epoch_loss_sum;
        let every = self.train_cfg.validate_every;
        let val_loss = if (every > 0 && self.position.global_step % every == 0) || self.is_finished() {
            Some(self.validation_loss()?).filter(|v| v.is_finite())
        } else {
            None
        };
        Ok(StepRecord {
            step: self.position.global_step,
            epoch,
            loss,
            running_loss,
            lr,
            grad_norm,
            skipped: outcome == StepOutcome::SkippedNonFinite,
            val_loss,
            wallclock: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Runs until the schedule ends or `max_steps` more steps were taken,
    /// handing every record to `on_step`.
    pub fn run(
        &mut self,
        max_steps: Option<u64>,
        mut on_step: impl FnMut(&Self, &StepRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let mut taken = 0;
        while !self.is_finished() && max_steps.is_none_or(|m| taken < m) {
            let rec = self.step()?;
            taken += 1;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    /// Snapshot with optimizer state and position for exact resumption.
    pub fn checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            model_config: self.model_cfg.clone(),
            params: self.params.clone(),
            optimizer: Some(self.opt.clone()),
            position: Some(self.position.clone()),
            meta,
        }
    }
}
