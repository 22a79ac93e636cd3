use super::config::{ExperimentConfig, ExperimentKind, GridPoint};
use super::data::RunData;
use super::HarnessError;
use crate::corpus::Vocabulary;
use crate::metrics::{entropy_bias, perplexity, MetricsRecord};
use crate::model::InvariantModel;
use crate::rng;

pub const ILM: &str = "ilm";
pub const ELM: &str = "elm";

pub const PERPLEXITY: &str = "perplexity";
pub const ENTROPY_BIAS: &str = "entropy_bias";

/// Every reported metric is a cost.
pub fn metric_lower_is_better(metric: &str) -> bool {
    matches!(metric, PERPLEXITY | ENTROPY_BIAS)
}

/// Masking seed shared by every run of a sub-experiment, so paired runs are
/// scored on the same masked positions.
pub(crate) fn eval_seed(cfg: &ExperimentConfig, point: &GridPoint) -> u64 {
    rng::derive_seed(cfg.master_seed, "eval", &[point.sub_index as u64])
}

pub(crate) struct RunIdentity<'a> {
    pub experiment: &'a str,
    pub variant: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub steps: u64,
}

/// Scores one trained model with the metrics routed to its experiment kind.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &ExperimentConfig,
    point: &GridPoint,
    data: &RunData,
    vocab: &Vocabulary,
    model: &InvariantModel,
    variant: &str,
    seed: u64,
    steps: u64,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let id = RunIdentity {
        experiment: &point.sub.name,
        variant,
        config_hash: &cfg.config_hash(point),
        seed,
        steps,
    };
    evaluate_as(cfg.kind(), &id, data, vocab, model, cfg.eval.mask_rate, eval_seed(cfg, point))
}

pub(crate) fn evaluate_as(
    kind: ExperimentKind,
    id: &RunIdentity<'_>,
    data: &RunData,
    vocab: &Vocabulary,
    model: &InvariantModel,
    mask_rate: f64,
    seed: u64,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let row = |metric: &str, value: f64| MetricsRecord {
        experiment: id.experiment.to_string(),
        variant: id.variant.to_string(),
        config_hash: id.config_hash.to_string(),
        seed: id.seed,
        steps: id.steps,
        metric: metric.to_string(),
        value,
        ci_low: None,
        ci_high: None,
    };
    let mut rows = Vec::new();
    if kind == ExperimentKind::Correlation {
        rows.push(row(ENTROPY_BIAS, entropy_bias(model, &data.test, vocab)?.mean));
    }
    rows.push(row(PERPLEXITY, perplexity(model, &data.test, vocab, mask_rate, seed)?));
    Ok(rows)
}

/// Scores a manifest entry's checkpoint, or `checkpoint` in its place.
pub fn eval_run(
    cfg: &ExperimentConfig,
    paths: &super::RunPaths,
    grid_point: usize,
    variant: &str,
    restart: usize,
    checkpoint: Option<&std::path::Path>,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let points = cfg.grid_points();
    let point = points.get(grid_point).ok_or_else(|| {
        HarnessError::Invalid(format!("grid point {grid_point} out of range (0..{})", points.len()))
    })?;
    if variant != ILM && variant != ELM {
        return Err(HarnessError::Invalid(format!("unknown variant {variant:?}; expected ilm or elm")));
    }
    let e = super::manifest::entry(cfg, point, variant, restart);
    let path = checkpoint.map(std::path::Path::to_path_buf).unwrap_or_else(|| paths.run(&e).join("model.json"));
    let (model, ckpt) = crate::model::read_checkpoint(&path)?;
    let data = super::load_data(&paths.data())?;
    if ckpt.vocab_hash != data.vocab.hash() {
        return Err(HarnessError::VocabMismatch {
            checkpoint: ckpt.vocab_hash,
            data: data.vocab.hash(),
        });
    }
    let run = data.run_data(cfg, point.sub_index, restart)?;
    evaluate(cfg, point, &run, &data.vocab, &model, variant, e.seed, point.n_steps)
}

/// Appends rows to a metrics CSV, creating it if needed.
pub fn append_metrics(path: &std::path::Path, rows: &[MetricsRecord]) -> Result<(), HarnessError> {
    let mut all = if path.exists() {
        crate::metrics::read_metrics_csv(path)?
    } else {
        Vec::new()
    };
    all.extend_from_slice(rows);
    crate::metrics::write_metrics_csv(path, &all)?;
    Ok(())
}
