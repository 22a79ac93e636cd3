use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::model::{EncoderConfig, EnsembleMode, InitMode};
use crate::training::{AdamBetas, PhiUpdate, Sampling, TrainConfig};

pub const MASTER_SEED_ENV: &str = "ILM_MASTER_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    StructuredNoise,
    Correlation,
    Ood,
    HeadsDynamics,
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StructuredNoise => "structured_noise",
            Self::Correlation => "correlation",
            Self::Ood => "ood",
            Self::HeadsDynamics => "heads_dynamics",
        })
    }
}

/// How the markup environment is sized against the clean one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSizing {
    /// Both environments hold the same number of sequences.
    #[default]
    EqualSequences,
    /// The markup environment holds about as many tokens as the clean one.
    EqualTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredNoiseCorpus {
    pub n_content: usize,
    pub n_markup: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub markup_rate: f64,
    #[serde(default)]
    pub sizing: EnvSizing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationCorpus {
    pub n_content: usize,
    pub n_pairs: usize,
    pub n_contexts: usize,
    pub seq_len: usize,
    pub n_sentences: usize,
    pub n_test: usize,
    pub pair_bias: f64,
    /// One sub-experiment per untouched fraction `p`.
    pub p_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodCorpus {
    pub n_content: usize,
    /// Domains generated; each restart draws its training and held-out
    /// domains from this pool.
    pub n_pool: usize,
    pub overlap: f64,
    #[serde(default = "default_shared_mix")]
    pub shared_mix: f64,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// One sub-experiment per number of training domains.
    pub n_train_domains: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsCorpus {
    pub n_content: usize,
    pub overlap: f64,
    #[serde(default = "default_shared_mix")]
    pub shared_mix: f64,
    pub seq_len: usize,
    /// Sentences per environment; each base domain yields two environments.
    pub n_per_env: usize,
    /// Checkpoints per run, evenly spaced.
    #[serde(default = "default_n_checkpoints")]
    pub n_checkpoints: u64,
}

fn default_shared_mix() -> f64 {
    crate::corpus::DEFAULT_SHARED_MIX
}

fn default_n_checkpoints() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", content = "corpus", rename_all = "snake_case")]
pub enum CorpusSpec {
    StructuredNoise(StructuredNoiseCorpus),
    Correlation(CorrelationCorpus),
    Ood(OodCorpus),
    HeadsDynamics(HeadsCorpus),
}

/// Encoder shape; the vocabulary size and seed are filled in per run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_attn_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub ensemble: EnsembleMode,
    #[serde(default)]
    pub init_mode: InitMode,
}

impl ModelShape {
    pub fn encoder_config(&self, vocab_size: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            n_layers: self.n_layers,
            n_attn_heads: self.n_attn_heads,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

/// Training settings shared by every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBase {
    pub batch_size: usize,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub adam: AdamBetas,
    #[serde(default)]
    pub phi_update: PhiUpdate,
    #[serde(default)]
    pub shuffle_env_order: bool,
    /// Batch sampling for the single-head baseline.
    #[serde(default)]
    pub elm_sampling: Sampling,
}

fn default_mask_rate() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub learning_rates: Vec<f32>,
    pub n_steps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default = "default_resamples")]
    pub n_resamples: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mask_rate: default_mask_rate(),
            n_resamples: default_resamples(),
            level: default_level(),
        }
    }
}

fn default_resamples() -> usize {
    10_000
}

fn default_level() -> f64 {
    0.95
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub corpus: CorpusSpec,
    pub master_seed: u64,
    pub n_restarts: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelShape,
    pub train: TrainBase,
    pub grid: Grid,
    #[serde(default)]
    pub eval: EvalSettings,
}

fn invalid(field: &str, detail: impl fmt::Display) -> HarnessError {
    HarnessError::Config(format!("{field}: {detail}"))
}

impl ExperimentConfig {
    pub fn kind(&self) -> ExperimentKind {
        match self.corpus {
            CorpusSpec::StructuredNoise(_) => ExperimentKind::StructuredNoise,
            CorpusSpec::Correlation(_) => ExperimentKind::Correlation,
            CorpusSpec::Ood(_) => ExperimentKind::Ood,
            CorpusSpec::HeadsDynamics(_) => ExperimentKind::HeadsDynamics,
        }
    }

    /// Parses JSON text; errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the master-seed override from the
    /// environment.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(d) => HarnessError::Config(format!("{}: {d}", path.display())),
            other => other,
        })?;
        if let Ok(v) = std::env::var(MASTER_SEED_ENV) {
            cfg.master_seed = v
                .trim()
                .parse()
                .map_err(|_| invalid(MASTER_SEED_ENV, format!("not an unsigned integer: {v:?}")))?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n_restarts == 0 {
            return Err(invalid("n_restarts", "must be at least 1"));
        }
        if self.grid.learning_rates.is_empty() || self.grid.n_steps.is_empty() {
            return Err(invalid("grid", "learning_rates and n_steps must be non-empty"));
        }
        if let Some(lr) = self.grid.learning_rates.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return Err(invalid("grid.learning_rates", format!("{lr} is not positive")));
        }
        let mut steps = self.grid.n_steps.clone();
        steps.sort_unstable();
        steps.dedup();
        if steps.len() != self.grid.n_steps.len() {
            return Err(invalid("grid.n_steps", "values must be distinct"));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        if !(self.train.mask_rate > 0.0 && self.train.mask_rate < 1.0) {
            return Err(invalid("train.mask_rate", "must lie in (0, 1)"));
        }
        if !(self.eval.mask_rate > 0.0 && self.eval.mask_rate < 1.0) {
            return Err(invalid("eval.mask_rate", "must lie in (0, 1)"));
        }
        if self.eval.n_resamples < 100 {
            return Err(invalid("eval.n_resamples", "must be at least 100"));
        }
        self.model
            .encoder_config(1, 0)
            .validate()
            .map_err(|e| invalid("model", e))?;
        match &self.corpus {
            CorpusSpec::StructuredNoise(c) => {
                if c.n_train == 0 || c.n_test == 0 {
                    return Err(invalid("corpus", "n_train and n_test must be positive"));
                }
                if !(c.markup_rate > 0.0 && c.markup_rate < 1.0) {
                    return Err(invalid("corpus.markup_rate", "must lie in (0, 1)"));
                }
            }
            CorpusSpec::Correlation(c) => {
                if c.p_values.is_empty() {
                    return Err(invalid("corpus.p_values", "must be non-empty"));
                }
                if let Some(p) = c.p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(invalid("corpus.p_values", format!("{p} is outside [0, 1]")));
                }
                if c.n_test == 0 {
                    return Err(invalid("corpus.n_test", "must be positive"));
                }
            }
            CorpusSpec::Ood(c) => {
                if c.n_train_domains.is_empty() {
                    return Err(invalid("corpus.n_train_domains", "must be non-empty"));
                }
                if let Some(n) = c.n_train_domains.iter().find(|&&n| n == 0 || n >= c.n_pool) {
                    return Err(invalid(
                        "corpus.n_train_domains",
                        format!("{n} must be between 1 and n_pool - 1 = {}", c.n_pool.saturating_sub(1)),
                    ));
                }
            }
            CorpusSpec::HeadsDynamics(c) => {
                if c.n_checkpoints == 0 {
                    return Err(invalid("corpus.n_checkpoints", "must be positive"));
                }
                if c.n_per_env == 0 {
                    return Err(invalid("corpus.n_per_env", "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Names of the sub-experiments, in config order.
    pub fn sub_experiments(&self) -> Vec<SubExperiment> {
        let kind = self.kind();
        match &self.corpus {
            CorpusSpec::Correlation(c) => c
                .p_values
                .iter()
                .map(|&p| SubExperiment {
                    name: format!("{kind}_p{p}"),
                    p: Some(p),
                    n_domains: None,
                })
                .collect(),
            CorpusSpec::Ood(c) => c
                .n_train_domains
                .iter()
                .map(|&n| SubExperiment {
                    name: format!("{kind}_n{n}"),
                    p: None,
                    n_domains: Some(n),
                })
                .collect(),
            _ => vec![SubExperiment {
                name: kind.to_string(),
                p: None,
                n_domains: None,
            }],
        }
    }

    /// Grid points in a fixed order: sub-experiment, learning rate, steps.
    pub fn grid_points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for (s, sub) in self.sub_experiments().into_iter().enumerate() {
            for (l, &lr) in self.grid.learning_rates.iter().enumerate() {
                for &steps in &self.grid.n_steps {
                    out.push(GridPoint {
                        index: out.len(),
                        sub_index: s,
                        sub: sub.clone(),
                        lr_index: l,
                        learning_rate: lr,
                        n_steps: steps,
                    });
                }
            }
        }
        out
    }

    pub fn train_config(&self, point: &GridPoint, seed: u64, single_head: bool) -> TrainConfig {
        TrainConfig {
            n_steps: point.n_steps,
            batch_size: self.train.batch_size,
            learning_rate: point.learning_rate,
            adam: self.train.adam,
            mask_rate: self.train.mask_rate,
            seed,
            phi_update: self.train.phi_update,
            shuffle_env_order: self.train.shuffle_env_order,
            sampling: if single_head {
                self.train.elm_sampling
            } else {
                Sampling::RoundRobin
            },
            checkpoint_every: 0,
        }
    }

    /// Identifies a grid point's full configuration; variant and restart
    /// are not part of it.
    pub fn config_hash(&self, point: &GridPoint) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            experiment: &'a str,
            corpus: &'a CorpusSpec,
            model: &'a ModelShape,
            train: &'a TrainBase,
            learning_rate: f32,
            n_steps: u64,
            master_seed: u64,
        }
        let key = Key {
            experiment: &point.sub.name,
            corpus: &self.corpus,
            model: &self.model,
            train: &self.train,
            learning_rate: point.learning_rate,
            n_steps: point.n_steps,
            master_seed: self.master_seed,
        };
        let bytes = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubExperiment {
    pub name: String,
    pub p: Option<f64>,
    pub n_domains: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub index: usize,
    pub sub_index: usize,
    pub sub: SubExperiment,
    pub lr_index: usize,
    pub learning_rate: f32,
    pub n_steps: u64,
}
