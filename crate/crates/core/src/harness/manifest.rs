use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, GridPoint};
use super::eval::{ELM, ILM};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Done,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub experiment: String,
    pub grid_point: usize,
    pub variant: String,
    pub restart: usize,
    pub learning_rate: f32,
    pub n_steps: u64,
    pub config_hash: String,
    /// Shared by the iLM and eLM entries of a pair.
    pub seed: u64,
    pub model_seed: u64,
    pub train_seed: u64,
    /// Run directory relative to the output root.
    pub dir: String,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub master_seed: u64,
    pub entries: Vec<RunEntry>,
}

/// Run seed of a (grid point, restart) pair. The step count is left out so
/// runs that differ only in length share a trajectory.
pub fn run_seed(master: u64, point: &GridPoint, restart: usize) -> u64 {
    rng::derive_seed(
        master,
        "run",
        &[point.sub_index as u64, point.lr_index as u64, restart as u64],
    )
}

pub(crate) fn entry(cfg: &ExperimentConfig, point: &GridPoint, variant: &str, restart: usize) -> RunEntry {
    let seed = run_seed(cfg.master_seed, point, restart);
    RunEntry {
        experiment: point.sub.name.clone(),
        grid_point: point.index,
        variant: variant.to_string(),
        restart,
        learning_rate: point.learning_rate,
        n_steps: point.n_steps,
        config_hash: cfg.config_hash(point),
        seed,
        model_seed: rng::derive_seed(seed, "model", &[]),
        train_seed: rng::derive_seed(seed, "train", &[]),
        dir: super::run::run_dir(&point.sub.name, variant, point.index, restart),
        status: RunStatus::Pending,
    }
}

/// Every grid point × restart × variant, in a fixed order.
pub fn build_manifest(cfg: &ExperimentConfig) -> RunManifest {
    let mut entries = Vec::new();
    for point in cfg.grid_points() {
        for restart in 0..cfg.n_restarts {
            for variant in [ILM, ELM] {
                entries.push(entry(cfg, &point, variant, restart));
            }
        }
    }
    RunManifest {
        master_seed: cfg.master_seed,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::tests::sample_json;

    #[test]
    fn entries_come_in_matched_pairs() {
        let cfg = ExperimentConfig::from_json(sample_json()).unwrap();
        let m = build_manifest(&cfg);
        assert_eq!(m.entries.len(), 8 * 2 * 2);
        for pair in m.entries.chunks(2) {
            assert_eq!(pair[0].variant, ILM);
            assert_eq!(pair[1].variant, ELM);
            assert_eq!(pair[0].seed, pair[1].seed);
            assert_eq!(pair[0].config_hash, pair[1].config_hash);
            assert_ne!(pair[0].dir, pair[1].dir);
        }
        assert_eq!(build_manifest(&cfg), m);
        // distinct restarts get distinct seeds
        assert_ne!(m.entries[0].seed, m.entries[2].seed);
    }
}
