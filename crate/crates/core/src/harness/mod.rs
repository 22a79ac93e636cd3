//! Experiment orchestration: configs, data generation, run manifests,
//! paired iLM/eLM training, evaluation and reports.

mod compare;
mod config;
mod data;
mod eval;
mod heads;
mod manifest;
mod report;
mod run;
mod svg;

pub use compare::{compare, compare_records, write_compare_outputs, CompareReport, MetricSummary, StepSummary, Summary, WinSummary};
pub use config::{
    CorpusSpec, CorrelationCorpus, EnvSizing, EvalSettings, ExperimentConfig, ExperimentKind, Grid, GridPoint,
    HeadsCorpus, ModelShape, OodCorpus, StructuredNoiseCorpus, SubExperiment, TrainBase, MASTER_SEED_ENV,
};
pub use data::{gen_data, load_data, ExperimentData, RunData};
pub use eval::{append_metrics, eval_run, evaluate, metric_lower_is_better, ELM, ILM};
pub use heads::{heads_series, read_heads_csv, write_heads_outputs, HeadsPoint, HeadsSeries};
pub use manifest::{build_manifest, RunEntry, RunManifest, RunStatus};
pub use report::render_report;
pub use run::{aggregate, run_all, run_dir, train_run, RunAllOutcome, RunPaths};

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary mismatch: checkpoint {checkpoint}, data {data}")]
    VocabMismatch { checkpoint: String, data: String },
    #[error("no matched iLM/eLM pairs")]
    NoPairs,
    #[error("{failed} of {total} runs failed")]
    RunsFailed { failed: usize, total: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}
