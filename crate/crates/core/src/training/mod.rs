//! Round-robin environment training and the single-head baseline.
//!
//! Each step draws a batch from one environment, computes the masked-LM loss
//! of the summed ensemble logits and updates the shared encoder plus the
//! head owned by that environment. Gradients reaching the other heads are
//! computed and dropped. The baseline runs the same loop with a single head
//! that is updated on every step.

mod log;
mod schedule;

pub use self::log::{StepRecord, TrainLog};
pub use schedule::{batch_scheduler, BatchScheduler, Sampling};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Environment, Vocabulary};
use crate::model::{InvariantModel, ModelError};
use crate::tensor::{Adam, AdamConfig, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{envs} environments but the model has {heads} heads")]
    EnvHeadMismatch { envs: usize, heads: usize },
    #[error("environment {0} is empty")]
    EmptyEnvironment(usize),
    #[error("non-finite value at step {step} (environment {env_id}): {detail}")]
    NonFiniteLoss { step: u64, env_id: usize, detail: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// When the shared encoder is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiUpdate {
    #[default]
    EveryStep,
    /// Only on steps whose 1-based index is a multiple of `k`.
    Periodic(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamBetas {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamBetas {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub adam: AdamBetas,
    pub mask_rate: f64,
    pub seed: u64,
    pub phi_update: PhiUpdate,
    pub shuffle_env_order: bool,
    pub sampling: Sampling,
    /// Emit a checkpoint marker every this many steps; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            batch_size: 16,
            learning_rate: 1e-3,
            adam: AdamBetas::default(),
            mask_rate: 0.15,
            seed: 0,
            phi_update: PhiUpdate::EveryStep,
            shuffle_env_order: false,
            sampling: Sampling::RoundRobin,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        // lr = 0 is allowed for frozen-parameter checks
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(TrainError::Config(format!("mask_rate must lie in (0, 1), got {}", self.mask_rate)));
        }
        if self.phi_update == PhiUpdate::Periodic(0) {
            return Err(TrainError::Config("periodic phi update needs k ≥ 1".into()));
        }
        Ok(())
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
        }
    }

    /// `n_steps` rounded up to a whole number of environment cycles.
    pub fn effective_steps(&self, n_envs: usize) -> u64 {
        let n = n_envs.max(1) as u64;
        self.n_steps.div_ceil(n) * n
    }
}

/// Which parameters a step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// One head per environment; the active environment's head is updated.
    Invariant,
    /// A single head updated on every step.
    Erm,
}

/// Step-by-step training driver.
pub struct Trainer<'a> {
    model: InvariantModel,
    scheduler: BatchScheduler<'a>,
    cfg: TrainConfig,
    variant: Variant,
    phi_opt: Adam,
    head_opts: Vec<Adam>,
    step: u64,
    total: u64,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: InvariantModel,
        envs: &'a [Environment],
        vocab: &'a Vocabulary,
        cfg: &TrainConfig,
        variant: Variant,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        match variant {
            Variant::Invariant if model.n_heads() != envs.len() => {
                return Err(TrainError::EnvHeadMismatch {
                    envs: envs.len(),
                    heads: model.n_heads(),
                })
            }
            Variant::Erm if model.n_heads() != 1 => {
                return Err(TrainError::Config(format!(
                    "baseline training needs a single-head model, got {} heads",
                    model.n_heads()
                )))
            }
            _ => {}
        }
        if cfg.sampling == Sampling::Pooled && model.n_heads() != 1 {
            return Err(TrainError::Config("pooled sampling requires a single head".into()));
        }
        for env in envs {
            env.validate(vocab)?;
        }
        let n_sources = match cfg.sampling {
            Sampling::RoundRobin => envs.len(),
            Sampling::Pooled => 1,
        };
        let total = cfg.effective_steps(n_sources);
        if total != cfg.n_steps {
            ::log::info!(
                "n_steps {} padded to {total} for {n_sources} environments",
                cfg.n_steps
            );
        }
        let scheduler = BatchScheduler::new(
            envs,
            vocab,
            cfg.batch_size,
            cfg.mask_rate,
            cfg.seed,
            model.config().max_seq_len,
            cfg.sampling,
            cfg.shuffle_env_order,
        )?;
        let phi_opt = Adam::new(model.phi().named().into_iter().map(|(_, t)| t));
        let head_opts = model
            .heads()
            .iter()
            .map(|h| Adam::new(h.named().into_iter().map(|(_, t)| t)))
            .collect();
        Ok(Self {
            model,
            scheduler,
            cfg: cfg.clone(),
            variant,
            phi_opt,
            head_opts,
            step: 0,
            total,
            log: TrainLog::default(),
        })
    }

    pub fn model(&self) -> &InvariantModel {
        &self.model
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn phi_optimizer(&self) -> &Adam {
        &self.phi_opt
    }

    pub fn head_optimizer(&self, e: usize) -> Option<&Adam> {
        self.head_opts.get(e)
    }

    /// Runs one gradient step.
    pub fn step(&mut self) -> Result<StepRecord, TrainError> {
        let batch = self.scheduler.next_batch()?;
        let step = self.step + 1;
        let env_id = batch.env_id;
        let head = match self.variant {
            Variant::Invariant => env_id,
            Variant::Erm => 0,
        };
        let non_finite = |e: TensorError| match e {
            TensorError::NonFinite { op } => TrainError::NonFiniteLoss {
                step,
                env_id,
                detail: format!("in {op}"),
            },
            other => other.into(),
        };
        let mut tape = Tape::new();
        let bindings = self.model.bind(&mut tape);
        let logits = self
            .model
            .forward_ensemble_on(&mut tape, &bindings, &batch.input_ids, batch.batch_size, batch.seq_len)
            .map_err(|e| match e {
                ModelError::Tensor(t) => non_finite(t),
                other => other.into(),
            })?;
        let loss = tape.masked_cross_entropy(logits, &batch.targets).map_err(non_finite)?;
        let loss_value = tape.value(loss)[0];
        let grads = tape.backward(loss).map_err(non_finite)?;

        let update_phi = match self.cfg.phi_update {
            PhiUpdate::EveryStep => true,
            PhiUpdate::Periodic(k) => step.is_multiple_of(k),
        };
        let adam = self.cfg.adam_config();
        self.model.zero_grads();

        let mut phi_params = self.model.phi_params_mut();
        for ((_, node), t) in bindings.phi.named().into_iter().zip(phi_params.iter_mut()) {
            grads.accumulate_into(*node, t)?;
        }
        let phi_grad_norm = grad_norm(&phi_params);
        if update_phi {
            self.phi_opt.step(&mut phi_params, &adam)?;
        }

        let mut head_params = self.model.head_params_mut(head)?;
        for ((_, node), t) in bindings.heads[head].named().into_iter().zip(head_params.iter_mut()) {
            grads.accumulate_into(*node, t)?;
        }
        let head_grad_norm = grad_norm(&head_params);
        self.head_opts[head].step(&mut head_params, &adam)?;
        self.model.zero_grads();

        self.step = step;
        let record = StepRecord {
            step,
            env_id,
            loss: loss_value,
            phi_grad_norm,
            head_grad_norm,
        };
        self.log.records.push(record.clone());
        if self.cfg.checkpoint_every > 0 && step.is_multiple_of(self.cfg.checkpoint_every) {
            self.log.checkpoints.push(step);
        }
        Ok(record)
    }

    /// Steps until `target` steps are done, calling `observe` after each.
    pub fn run_until(
        &mut self,
        target: u64,
        mut observe: impl FnMut(&Self) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        while self.step < target {
            self.step()?;
            observe(self)?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_until(self.total, |_| Ok(()))
    }

    pub fn into_parts(self) -> (InvariantModel, TrainLog) {
        (self.model, self.log)
    }
}

fn grad_norm(params: &[&mut crate::tensor::Tensor]) -> f64 {
    params
        .iter()
        .map(|t| t.grad_norm().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Round-robin training of a model with one head per environment.
pub fn train_irm_games(
    model: InvariantModel,
    envs: &[Environment],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(InvariantModel, TrainLog), TrainError> {
    let mut t = Trainer::new(model, envs, vocab, cfg, Variant::Invariant)?;
    t.run()?;
    Ok(t.into_parts())
}

/// Baseline training of a single-head model on the same batch schedule.
pub fn train_erm(
    model: InvariantModel,
    envs: &[Environment],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<(InvariantModel, TrainLog), TrainError> {
    let mut t = Trainer::new(model, envs, vocab, cfg, Variant::Erm)?;
    t.run()?;
    Ok(t.into_parts())
}
