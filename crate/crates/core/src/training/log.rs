use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub env_id: usize,
    pub loss: f32,
    pub phi_grad_norm: f64,
    pub head_grad_norm: f64,
}

/// Per-step records plus the steps at which checkpoints were due.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<u64>,
}

impl TrainLog {
    pub fn to_csv_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| TrainError::Config(e.to_string()))?;
        }
        if self.records.is_empty() {
            w.write_record(["step", "env_id", "loss", "phi_grad_norm", "head_grad_norm"])
                .map_err(|e| TrainError::Config(e.to_string()))?;
        }
        w.into_inner().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_csv_bytes()?;
        crate::corpus::write_bytes_atomic(path, &bytes).map_err(TrainError::Corpus)
    }

    pub fn read_csv(path: &Path) -> Result<Self, TrainError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e.to_string()),
        })?;
        let records = r
            .deserialize()
            .collect::<Result<Vec<StepRecord>, _>>()
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self {
            records,
            checkpoints: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_roundtrip() {
        let log = TrainLog {
            records: vec![StepRecord {
                step: 1,
                env_id: 0,
                loss: 2.5,
                phi_grad_norm: 0.125,
                head_grad_norm: 1.0,
            }],
            checkpoints: vec![],
        };
        let bytes = log.to_csv_bytes().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("step,env_id,loss,phi_grad_norm,head_grad_norm\n"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        log.write_csv(&p).unwrap();
        assert_eq!(TrainLog::read_csv(&p).unwrap().records, log.records);
        let empty = String::from_utf8(TrainLog::default().to_csv_bytes().unwrap()).unwrap();
        assert_eq!(empty, "step,env_id,loss,phi_grad_norm,head_grad_norm\n");
    }
}
