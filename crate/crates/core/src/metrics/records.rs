use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;

pub const METRICS_HEADER: [&str; 9] = [
    "experiment",
    "variant",
    "config_hash",
    "seed",
    "steps",
    "metric",
    "value",
    "ci_low",
    "ci_high",
];

/// One evaluation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
    pub metric: String,
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !self.value.is_finite() {
            return Err(MetricsError::Argument(format!("{} value is not finite", self.metric)));
        }
        match (self.ci_low, self.ci_high) {
            (None, None) => Ok(()),
            (Some(lo), Some(hi)) if lo <= self.value && self.value <= hi => Ok(()),
            _ => Err(MetricsError::Argument(format!(
                "{}: interval ({:?}, {:?}) does not bracket {}",
                self.metric, self.ci_low, self.ci_high, self.value
            ))),
        }
    }
}

fn csv_err(e: impl ToString) -> MetricsError {
    MetricsError::Csv(e.to_string())
}

pub fn metrics_csv_bytes(records: &[MetricsRecord]) -> Result<Vec<u8>, MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in records {
        r.validate()?;
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<(), MetricsError> {
    crate::corpus::write_bytes_atomic(path, &metrics_csv_bytes(records)?)?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(csv_err(format!("{}: unexpected header {header:?}", path.display())));
    }
    r.deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| csv_err(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdsRow {
    pub env_id: usize,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

pub fn write_mds_csv(path: &Path, rows: &[MdsRow]) -> Result<(), MetricsError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["env_id", "label", "x", "y"]).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    crate::corpus::write_bytes_atomic(path, &bytes)?;
    Ok(())
}
