use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, EncoderParams, EnsembleMode, HeadParams, InvariantModel, ModelError};
use crate::corpus::write_json_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "ILM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub config: EncoderConfig,
    pub ensemble: EnsembleMode,
    pub step: u64,
    pub vocab_hash: String,
    pub phi: Vec<NamedTensor>,
    pub heads: Vec<Vec<NamedTensor>>,
}

fn named(items: Vec<(String, &Tensor)>) -> Vec<NamedTensor> {
    items
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn from_model(model: &InvariantModel, step: u64, vocab_hash: impl Into<String>) -> Self {
        Self {
            magic: CHECKPOINT_MAGIC.into(),
            config: model.config().clone(),
            ensemble: model.ensemble(),
            step,
            vocab_hash: vocab_hash.into(),
            phi: named(model.phi().named()),
            heads: model.heads().iter().map(|h| named(h.named())).collect(),
        }
    }

    pub fn to_model(&self) -> Result<InvariantModel, ModelError> {
        let bad = |detail: String| ModelError::Checkpoint {
            path: String::new(),
            detail,
        };
        if self.magic != CHECKPOINT_MAGIC {
            return Err(bad(format!("bad magic {:?}", self.magic)));
        }
        let reference = super::init_model(&self.config, 1, super::InitMode::SharedHeadCopy)?;
        let tensors = |items: &[NamedTensor], expected: Vec<(String, &Tensor)>| {
            if items.len() != expected.len() {
                return Err(bad(format!("expected {} tensors, found {}", expected.len(), items.len())));
            }
            items
                .iter()
                .zip(expected)
                .map(|(nt, (name, _))| {
                    if nt.name != name {
                        return Err(bad(format!("expected tensor {name}, found {}", nt.name)));
                    }
                    Ok(Tensor::parameter(nt.shape.clone(), nt.data.clone())?)
                })
                .collect::<Result<Vec<_>, ModelError>>()
        };
        let phi = EncoderParams::from_fields(
            self.config.n_layers,
            tensors(&self.phi, reference.phi().named())?.into_iter(),
        )
        .ok_or_else(|| bad("encoder tensor count".into()))?;
        let heads = self
            .heads
            .iter()
            .map(|h| {
                HeadParams::from_fields(tensors(h, reference.heads()[0].named())?.into_iter())
                    .ok_or_else(|| bad("head tensor count".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        InvariantModel::from_parts(self.config.clone(), self.ensemble, phi, heads)
    }
}

/// Writes atomically: a crash never leaves a partial file under `path`.
pub fn write_checkpoint(
    path: &Path,
    model: &InvariantModel,
    step: u64,
    vocab_hash: &str,
) -> Result<(), ModelError> {
    write_json_atomic(path, &Checkpoint::from_model(model, step, vocab_hash)).map_err(|e| {
        ModelError::Checkpoint {
            path: path.display().to_string(),
            detail: e.to_string(),
        }
    })
}

pub fn read_checkpoint(path: &Path) -> Result<(InvariantModel, Checkpoint), ModelError> {
    let err = |detail: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
    let model = ckpt.to_model().map_err(|e| match e {
        ModelError::Checkpoint { detail, .. } => err(detail),
        other => other,
    })?;
    Ok((model, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, InitMode};

    #[test]
    fn roundtrip_is_exact() {
        let cfg = EncoderConfig {
            vocab_size: 9,
            embed_dim: 4,
            n_layers: 1,
            n_attn_heads: 2,
            ffn_dim: 6,
            max_seq_len: 5,
            seed: 3,
        };
        let model = init_model(&cfg, 3, InitMode::Fresh).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        write_checkpoint(&path, &model, 17, "abc").unwrap();
        let (back, ckpt) = read_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(ckpt.step, 17);
        assert_eq!(ckpt.vocab_hash, "abc");
        assert_eq!(ckpt.phi[2].name, "blocks.0.ln1_gain");
    }

    #[test]
    fn rejects_bad_magic_and_garbage() {
        let cfg = EncoderConfig::new(7);
        let model = init_model(&cfg, 1, InitMode::Fresh).unwrap();
        let mut ckpt = Checkpoint::from_model(&model, 0, "h");
        ckpt.magic = "XXXX".into();
        assert!(ckpt.to_model().is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, b"{\"magic\": \"ILM1\"").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
