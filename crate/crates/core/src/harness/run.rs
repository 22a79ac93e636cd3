use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;

use super::config::{CorpusSpec, ExperimentConfig, GridPoint};
use super::data::{gen_data, load_data, ExperimentData, RunData};
use super::eval::{evaluate, ELM, ILM};
use super::heads::{heads_series, write_heads_outputs};
use super::manifest::{build_manifest, entry, RunEntry, RunManifest, RunStatus};
use super::{io_err, HarnessError};
use crate::metrics::{write_metrics_csv, MetricsRecord};
use crate::model::{init_model, write_checkpoint, InvariantModel};
use crate::training::{Sampling, TrainLog, Trainer, Variant};

/// Run directory relative to the output root.
pub fn run_dir(experiment: &str, variant: &str, grid_point: usize, restart: usize) -> String {
    format!("runs/{experiment}/{variant}/g{grid_point}/r{restart}")
}

/// Standard file locations under an output root.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Output root from the config, falling back to `out/<experiment kind>`.
    pub fn for_config(cfg: &ExperimentConfig, override_root: Option<&Path>) -> Self {
        let root = override_root
            .map(Path::to_path_buf)
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out").join(cfg.kind().to_string()));
        Self::new(root)
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn heads(&self, experiment: &str, grid_point: usize, restart: usize) -> PathBuf {
        self.root
            .join("heads")
            .join(experiment)
            .join(format!("g{grid_point}"))
            .join(format!("r{restart}"))
    }

    pub fn run(&self, entry: &RunEntry) -> PathBuf {
        self.root.join(&entry.dir)
    }
}

fn build_model(cfg: &ExperimentConfig, vocab_size: usize, n_envs: usize, variant: &str, seed: u64) -> Result<InvariantModel, HarnessError> {
    let enc = cfg.model.encoder_config(vocab_size, seed);
    let n_heads = if variant == ILM { n_envs } else { 1 };
    let mut model = init_model(&enc, n_heads, cfg.model.init_mode)?;
    model.set_ensemble(cfg.model.ensemble);
    Ok(model)
}

fn parse_variant(variant: &str) -> Result<Variant, HarnessError> {
    match variant {
        ILM => Ok(Variant::Invariant),
        ELM => Ok(Variant::Erm),
        other => Err(HarnessError::Invalid(format!("unknown variant {other:?}; expected ilm or elm"))),
    }
}

fn write_run(dir: &Path, model: &InvariantModel, log: &TrainLog, step: u64, vocab_hash: &str) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_checkpoint(&dir.join("model.json"), model, step, vocab_hash)?;
    log.write_csv(&dir.join("log.csv"))?;
    Ok(())
}

/// One training trajectory; every grid point sharing its learning rate is a
/// snapshot along it.
struct Track<'a> {
    sub_index: usize,
    restart: usize,
    variant: &'static str,
    points: Vec<&'a GridPoint>,
}

struct TrackOutput {
    rows: Vec<MetricsRecord>,
    status: Result<(), String>,
}

fn steps_for(points: &[&GridPoint], cfg: &ExperimentConfig, n_sources: usize, single_head: bool) -> Vec<(u64, usize)> {
    let mut v: Vec<(u64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (cfg.train_config(p, 0, single_head).effective_steps(n_sources), i))
        .collect();
    v.sort();
    v
}

fn heads_checkpoint_steps(total: u64, n: u64) -> Vec<u64> {
    let mut s: Vec<u64> = (0..=n).map(|k| (total * k).div_ceil(n)).collect();
    s.dedup();
    s
}

fn run_track(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    data: &ExperimentData,
    track: &Track<'_>,
) -> Result<Vec<MetricsRecord>, HarnessError> {
    let run: RunData = data.run_data(cfg, track.sub_index, track.restart)?;
    let first = track.points[0];
    let e0 = entry(cfg, first, track.variant, track.restart);
    let single = track.variant == ELM;
    let model = build_model(cfg, data.vocab.len(), run.envs.len(), track.variant, e0.model_seed)?;
    let max_point = track.points.iter().max_by_key(|p| p.n_steps).expect("track has points");
    let tcfg = cfg.train_config(max_point, e0.train_seed, single);
    let n_sources = if tcfg.sampling == Sampling::Pooled { 1 } else { run.envs.len() };
    let mut trainer = Trainer::new(model, &run.envs, &data.vocab, &tcfg, parse_variant(track.variant)?)?;
    let vocab_hash = data.vocab.hash();

    let heads_steps = match (&cfg.corpus, track.variant) {
        (CorpusSpec::HeadsDynamics(h), ILM) => heads_checkpoint_steps(trainer.total_steps(), h.n_checkpoints),
        _ => Vec::new(),
    };
    let mut heads_snapshots: Vec<(u64, InvariantModel)> = Vec::new();
    let mut rows = Vec::new();
    let targets = steps_for(&track.points, cfg, n_sources, single);
    let mut stops: Vec<u64> = targets.iter().map(|t| t.0).chain(heads_steps.iter().copied()).collect();
    stops.sort_unstable();
    stops.dedup();
    for stop in stops {
        trainer.run_until(stop, |_| Ok(()))?;
        if heads_steps.contains(&stop) {
            heads_snapshots.push((stop, trainer.model().clone()));
        }
        for &(_, i) in targets.iter().filter(|t| t.0 == stop) {
            let point = track.points[i];
            let e = entry(cfg, point, track.variant, track.restart);
            let mut log = trainer.log().clone();
            log.records.truncate(stop as usize);
            write_run(&paths.run(&e), trainer.model(), &log, stop, &vocab_hash)?;
            rows.extend(evaluate(cfg, point, &run, &data.vocab, trainer.model(), track.variant, e.seed, point.n_steps)?);
        }
    }
    if !heads_snapshots.is_empty() {
        let refs: Vec<(u64, &InvariantModel)> = heads_snapshots.iter().map(|(s, m)| (*s, m)).collect();
        let series = heads_series(&refs, &run.grouping)?;
        write_heads_outputs(&paths.heads(&max_point.sub.name, max_point.index, track.restart), &series)?;
        for (s, m) in &heads_snapshots {
            let dir = paths.run(&entry(cfg, max_point, ILM, track.restart)).join("checkpoints");
            write_checkpoint(&dir.join(format!("step_{s:06}.json")), m, *s, &vocab_hash)?;
        }
    }
    Ok(rows)
}

/// Trains a single manifest entry from scratch and writes its checkpoint
/// and log. Partial outputs are removed on failure.
pub fn train_run(
    cfg: &ExperimentConfig,
    paths: &RunPaths,
    grid_point: usize,
    variant: &str,
    restart: usize,
) -> Result<RunEntry, HarnessError> {
    let points = cfg.grid_points();
    let point = points.get(grid_point).ok_or_else(|| {
        HarnessError::Invalid(format!("grid point {grid_point} out of range (0..{})", points.len()))
    })?;
    if restart >= cfg.n_restarts {
        return Err(HarnessError::Invalid(format!(
            "restart {restart} out of range (0..{})",
            cfg.n_restarts
        )));
    }
    let kind = parse_variant(variant)?;
    let data = load_data(&paths.data())?;
    let run = data.run_data(cfg, point.sub_index, restart)?;
    let mut e = entry(cfg, point, variant, restart);
    let dir = paths.run(&e);
    let result = (|| -> Result<(), HarnessError> {
        let model = build_model(cfg, data.vocab.len(), run.envs.len(), variant, e.model_seed)?;
        let tcfg = cfg.train_config(point, e.train_seed, variant == ELM);
        let mut trainer = Trainer::new(model, &run.envs, &data.vocab, &tcfg, kind)?;
        trainer.run()?;
        let steps = trainer.steps_done();
        let (model, log) = trainer.into_parts();
        write_run(&dir, &model, &log, steps, &data.vocab.hash())
    })();
    if let Err(err) = result {
        let _ = std::fs::remove_dir_all(&dir);
        return Err(err);
    }
    e.status = RunStatus::Done;
    Ok(e)
}

#[derive(Debug, Clone)]
pub struct RunAllOutcome {
    pub manifest: RunManifest,
    pub records: Vec<MetricsRecord>,
    pub failed: usize,
}

/// Generates data, trains every manifest entry, evaluates every checkpoint
/// and writes `metrics.csv` and `manifest.json`.
pub fn run_all(cfg: &ExperimentConfig, paths: &RunPaths, jobs: usize) -> Result<RunAllOutcome, HarnessError> {
    gen_data(cfg, &paths.data())?;
    let data = load_data(&paths.data())?;
    let points = cfg.grid_points();
    let mut groups: BTreeMap<(usize, usize), Vec<&GridPoint>> = BTreeMap::new();
    for p in &points {
        groups.entry((p.sub_index, p.lr_index)).or_default().push(p);
    }
    let mut tracks = Vec::new();
    for ((sub_index, _), pts) in &groups {
        for restart in 0..cfg.n_restarts {
            for variant in [ILM, ELM] {
                tracks.push(Track {
                    sub_index: *sub_index,
                    restart,
                    variant,
                    points: pts.clone(),
                });
            }
        }
    }
    info!("{} trajectories over {} grid points", tracks.len(), points.len());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let outputs: Vec<TrackOutput> = pool.install(|| {
        tracks
            .par_iter()
            .map(|t| match run_track(cfg, paths, &data, t) {
                Ok(rows) => TrackOutput { rows, status: Ok(()) },
                Err(e) => {
                    warn!("{} {} restart {} failed: {e}", groups_name(t), t.variant, t.restart);
                    for p in &t.points {
                        let _ = std::fs::remove_dir_all(paths.run(&entry(cfg, p, t.variant, t.restart)));
                    }
                    TrackOutput {
                        rows: Vec::new(),
                        status: Err(e.to_string()),
                    }
                }
            })
            .collect()
    });

    let mut manifest = build_manifest(cfg);
    let mut failed = 0;
    let mut records = Vec::new();
    for (t, out) in tracks.iter().zip(outputs) {
        let indices: Vec<usize> = t.points.iter().map(|p| p.index).collect();
        for e in manifest
            .entries
            .iter_mut()
            .filter(|e| e.variant == t.variant && e.restart == t.restart && indices.contains(&e.grid_point))
        {
            e.status = match &out.status {
                Ok(()) => RunStatus::Done,
                Err(msg) => {
                    failed += 1;
                    RunStatus::Failed { error: msg.clone() }
                }
            };
        }
        records.extend(out.rows);
    }
    records.sort_by(|a, b| {
        (&a.experiment, &a.metric, a.steps, &a.config_hash, a.seed, &a.variant).cmp(&(
            &b.experiment,
            &b.metric,
            b.steps,
            &b.config_hash,
            b.seed,
            &b.variant,
        ))
    });
    write_metrics_csv(&paths.metrics(), &records)?;
    crate::corpus::write_json_atomic(&paths.manifest(), &manifest)?;
    Ok(RunAllOutcome {
        manifest,
        records,
        failed,
    })
}

fn groups_name<'a>(t: &Track<'a>) -> &'a str {
    &t.points[0].sub.name
}

/// Compares the metrics of a finished `run_all`, collects head-distance
/// series and writes the report directory.
pub fn aggregate(cfg: &ExperimentConfig, paths: &RunPaths) -> Result<Vec<PathBuf>, HarnessError> {
    let seed = crate::rng::derive_seed(cfg.master_seed, "compare", &[]);
    let report = super::compare::compare(&paths.metrics(), seed, cfg.eval.n_resamples, cfg.eval.level)?;
    let dir = paths.report();
    let mut written = super::compare::write_compare_outputs(&dir, &report)?;
    let mut heads = Vec::new();
    for point in cfg.grid_points() {
        for restart in 0..cfg.n_restarts {
            let file = paths.heads(&point.sub.name, point.index, restart).join("heads.csv");
            if file.exists() {
                let label = format!("{} g{} r{restart}", point.sub.name, point.index);
                heads.push((label, super::heads::read_heads_csv(&file)?));
            }
        }
    }
    let md = dir.join("report.md");
    crate::corpus::write_bytes_atomic(&md, super::report::render_report(&report, &heads).as_bytes())?;
    written.push(md);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_checkpoints_cover_both_ends() {
        assert_eq!(heads_checkpoint_steps(100, 10), (0..=10).map(|k| 10 * k).collect::<Vec<_>>());
        assert_eq!(heads_checkpoint_steps(4, 10), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn run_dirs_encode_identity() {
        assert_eq!(run_dir("ood_n3", ELM, 4, 2), "runs/ood_n3/elm/g4/r2");
    }
}
