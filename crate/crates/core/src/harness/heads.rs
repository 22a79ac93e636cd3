use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, HarnessError};
use crate::metrics::{classical_mds, d_in_d_out, head_distances, write_mds_csv, MdsRow};
use crate::model::InvariantModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadsPoint {
    pub step: u64,
    pub d_in: f64,
    pub d_out: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadsSeries {
    pub points: Vec<HeadsPoint>,
    /// Two-dimensional embedding of the last checkpoint's heads.
    pub mds: Vec<MdsRow>,
}

/// D_in / D_out per checkpoint, in the given order, plus an MDS layout of
/// the final checkpoint.
pub fn heads_series(checkpoints: &[(u64, &InvariantModel)], grouping: &[String]) -> Result<HeadsSeries, HarnessError> {
    let Some((_, last)) = checkpoints.last() else {
        return Err(HarnessError::Invalid("no checkpoints given".into()));
    };
    let mut points = Vec::with_capacity(checkpoints.len());
    for (step, model) in checkpoints {
        if model.n_heads() != grouping.len() {
            return Err(HarnessError::Invalid(format!(
                "checkpoint at step {step} has {} heads but the grouping names {} environments",
                model.n_heads(),
                grouping.len()
            )));
        }
        let (d_in, d_out) = d_in_d_out(&head_distances(model)?, grouping)?;
        points.push(HeadsPoint {
            step: *step,
            d_in,
            d_out,
        });
    }
    let coords = classical_mds(&head_distances(last)?, 2)?;
    let mds = coords
        .into_iter()
        .enumerate()
        .map(|(e, c)| MdsRow {
            env_id: e,
            label: grouping[e].clone(),
            x: c[0],
            y: c[1],
        })
        .collect();
    Ok(HeadsSeries { points, mds })
}

/// Writes `heads.csv` and `mds.csv` into `dir`.
pub fn write_heads_outputs(dir: &Path, series: &HeadsSeries) -> Result<Vec<PathBuf>, HarnessError> {
    let heads = dir.join("heads.csv");
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &series.points {
        w.serialize(p).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    crate::corpus::write_bytes_atomic(&heads, &bytes)?;
    let mds = dir.join("mds.csv");
    write_mds_csv(&mds, &series.mds)?;
    Ok(vec![heads, mds])
}

pub fn read_heads_csv(path: &Path) -> Result<Vec<HeadsPoint>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<HeadsPoint>, _>>()
        .map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))
}
