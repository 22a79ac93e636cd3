//! The invariant language model.
//!
//! `phi` is a small pre-norm transformer encoder shared by every
//! environment; each environment owns one [`HeadParams`]. The forward pass
//! feeds the encoder output through every head and combines the logits
//! (sum by default, optionally mean). A single-head model is the ERM
//! baseline.

mod checkpoint;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_MAGIC};
pub use params::{BlockParams, EncoderParams, HeadParams, INIT_STD};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, PAD};
use crate::rng;
use crate::tensor::{NodeId, Tape, Tensor, TensorError, ATTENTION_MASK_VALUE};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("model has no heads")]
    NoHeads,
    #[error("head index {index} out of range for {n} heads")]
    HeadIndex { index: usize, n: usize },
    #[error("token id {id} at position {position} exceeds vocabulary size {vocab}")]
    TokenOutOfRange {
        id: TokenId,
        position: usize,
        vocab: usize,
    },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("input has {got} ids, expected batch {batch} × length {len}")]
    InputShape { got: usize, batch: usize, len: usize },
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_attn_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            n_layers: 2,
            n_attn_heads: 2,
            ffn_dim: 128,
            max_seq_len: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("n_attn_heads", self.n_attn_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.n_attn_heads) {
            return Err(ModelError::Config(format!(
                "embed_dim {} is not divisible by n_attn_heads {}",
                self.embed_dim, self.n_attn_heads
            )));
        }
        Ok(())
    }

    /// Closed-form parameter counts: `(encoder, one head)`.
    pub fn param_counts(&self) -> (usize, usize) {
        let (v, d, f, l) = (self.vocab_size, self.embed_dim, self.ffn_dim, self.max_seq_len);
        let block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
        let encoder = v * d + l * d + self.n_layers * block + 2 * d;
        let head = d * d + d + 2 * d + d * v + v;
        (encoder, head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Every head draws its own weights.
    Fresh,
    /// All heads start as copies of one template.
    #[default]
    SharedHeadCopy,
}

/// Shared encoder plus one head per training environment.
#[derive(Debug, Clone, PartialEq)]
pub struct InvariantModel {
    config: EncoderConfig,
    ensemble: EnsembleMode,
    phi: EncoderParams<Tensor>,
    heads: Vec<HeadParams<Tensor>>,
}

/// Tape handles for every parameter of a model.
#[derive(Debug, Clone)]
pub struct Bindings {
    pub phi: EncoderParams<NodeId>,
    pub heads: Vec<HeadParams<NodeId>>,
}

/// Anything that maps a padded id matrix to per-position vocabulary logits.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    /// Logits, `batch × len × vocab_size`, row-major.
    fn logits(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<Vec<f32>, ModelError>;
}

pub fn init_model(
    config: &EncoderConfig,
    n_envs: usize,
    init_mode: InitMode,
) -> Result<InvariantModel, ModelError> {
    config.validate()?;
    if n_envs == 0 {
        return Err(ModelError::NoHeads);
    }
    let mut rng = rng::stream(config.seed, "init", &[]);
    let phi = params::init_encoder(config, &mut rng);
    let template = params::init_head(config, &mut rng);
    let mut heads = vec![template.clone()];
    for _ in 1..n_envs {
        heads.push(match init_mode {
            InitMode::SharedHeadCopy => template.clone(),
            InitMode::Fresh => params::init_head(config, &mut rng),
        });
    }
    Ok(InvariantModel {
        config: config.clone(),
        ensemble: EnsembleMode::Sum,
        phi,
        heads,
    })
}

impl InvariantModel {
    pub fn from_parts(
        config: EncoderConfig,
        ensemble: EnsembleMode,
        phi: EncoderParams<Tensor>,
        heads: Vec<HeadParams<Tensor>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        if heads.is_empty() {
            return Err(ModelError::NoHeads);
        }
        let reference = init_model(&config, 1, InitMode::SharedHeadCopy)?;
        let same_shapes = |a: Vec<(String, &Tensor)>, b: Vec<(String, &Tensor)>| {
            a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.1.shape() == y.1.shape())
        };
        if !same_shapes(phi.named(), reference.phi.named())
            || !heads
                .iter()
                .all(|h| same_shapes(h.named(), reference.heads[0].named()))
        {
            return Err(ModelError::Config("parameter shapes do not match config".into()));
        }
        Ok(Self {
            config,
            ensemble,
            phi,
            heads,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn ensemble(&self) -> EnsembleMode {
        self.ensemble
    }

    pub fn set_ensemble(&mut self, mode: EnsembleMode) {
        self.ensemble = mode;
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn phi(&self) -> &EncoderParams<Tensor> {
        &self.phi
    }

    pub fn head(&self, e: usize) -> Result<&HeadParams<Tensor>, ModelError> {
        self.heads.get(e).ok_or(ModelError::HeadIndex {
            index: e,
            n: self.heads.len(),
        })
    }

    pub fn heads(&self) -> &[HeadParams<Tensor>] {
        &self.heads
    }

    pub fn phi_params_mut(&mut self) -> Vec<&mut Tensor> {
        self.phi.fields_mut()
    }

    pub fn head_params_mut(&mut self, e: usize) -> Result<Vec<&mut Tensor>, ModelError> {
        let n = self.heads.len();
        self.heads
            .get_mut(e)
            .map(HeadParams::fields_mut)
            .ok_or(ModelError::HeadIndex { index: e, n })
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.phi.fields_mut();
        for h in &mut self.heads {
            out.extend(h.fields_mut());
        }
        out
    }

    pub fn zero_grads(&mut self) {
        crate::tensor::zero_grads(self.all_params_mut());
    }

    pub fn n_params(&self) -> usize {
        let phi: usize = self.phi.named().iter().map(|(_, t)| t.numel()).sum();
        let heads: usize = self
            .heads
            .iter()
            .flat_map(|h| h.named())
            .map(|(_, t)| t.numel())
            .sum();
        phi + heads
    }

    /// All parameters of head `e` concatenated in a fixed order.
    pub fn head_weights_flat(&self, e: usize) -> Result<Vec<f32>, ModelError> {
        Ok(self
            .head(e)?
            .named()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect())
    }

    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        Bindings {
            phi: params::bind_encoder(&self.phi, tape),
            heads: self.heads.iter().map(|h| params::bind_head(h, tape)).collect(),
        }
    }

    /// Adds tape gradients into the `grad` buffers of every parameter.
    pub fn accumulate_grads(
        &mut self,
        grads: &crate::tensor::Gradients,
        bindings: &Bindings,
    ) -> Result<(), ModelError> {
        for (node, tensor) in bindings
            .phi
            .named()
            .into_iter()
            .zip(self.phi.fields_mut())
        {
            grads.accumulate_into(*node.1, tensor)?;
        }
        for (hb, head) in bindings.heads.iter().zip(self.heads.iter_mut()) {
            for (node, tensor) in hb.named().into_iter().zip(head.fields_mut()) {
                grads.accumulate_into(*node.1, tensor)?;
            }
        }
        Ok(())
    }

    fn check_input(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<(), ModelError> {
        if ids.len() != batch * len || batch == 0 || len == 0 {
            return Err(ModelError::InputShape {
                got: ids.len(),
                batch,
                len,
            });
        }
        if len > self.config.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        if let Some((position, &id)) = ids
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                id,
                position,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Encoder output `[batch, len, embed_dim]`. Keys holding `PAD` are
    /// excluded from attention.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        phi: &EncoderParams<NodeId>,
        ids: &[TokenId],
        batch: usize,
        len: usize,
    ) -> Result<NodeId, ModelError> {
        self.check_input(ids, batch, len)?;
        let d = self.config.embed_dim;
        let n_heads = self.config.n_attn_heads;
        let dh = d / n_heads;

        let tok_ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let tok = tape.embedding(phi.tok_emb, &tok_ids)?;
        let pos = tape.embedding(phi.pos_emb, &pos_ids)?;
        let h = tape.add(tok, pos)?;
        let mut h = tape.reshape(h, &[batch, len, d])?;

        let mut mask = vec![0.0f32; batch * n_heads * len * len];
        for b in 0..batch {
            for k in 0..len {
                if ids[b * len + k] == PAD {
                    for hh in 0..n_heads {
                        for q in 0..len {
                            mask[((b * n_heads + hh) * len + q) * len + k] = ATTENTION_MASK_VALUE;
                        }
                    }
                }
            }
        }
        let mask = tape.constant(vec![batch, n_heads, len, len], mask)?;
        let scale = 1.0 / (dh as f32).sqrt();

        for blk in &phi.blocks {
            let a = tape.layer_norm(h, blk.ln1_gain, blk.ln1_bias)?;
            let split = |tape: &mut Tape, w: NodeId, bias: NodeId| -> Result<NodeId, TensorError> {
                let x = tape.matmul(a, w)?;
                let x = tape.add_bias(x, bias)?;
                let x = tape.reshape(x, &[batch, len, n_heads, dh])?;
                tape.permute(x, &[0, 2, 1, 3])
            };
            let q = split(tape, blk.wq, blk.bq)?;
            let k = split(tape, blk.wk, blk.bk)?;
            let v = split(tape, blk.wv, blk.bv)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let scores = tape.add(scores, mask)?;
            let attn = tape.softmax(scores, 3)?;
            let ctx = tape.matmul(attn, v)?;
            let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = tape.reshape(ctx, &[batch, len, d])?;
            let o = tape.matmul(ctx, blk.wo)?;
            let o = tape.add_bias(o, blk.bo)?;
            h = tape.add(h, o)?;

            let f = tape.layer_norm(h, blk.ln2_gain, blk.ln2_bias)?;
            let f = tape.matmul(f, blk.w1)?;
            let f = tape.add_bias(f, blk.b1)?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, blk.w2)?;
            let f = tape.add_bias(f, blk.b2)?;
            h = tape.add(h, f)?;
        }
        Ok(tape.layer_norm(h, phi.final_gain, phi.final_bias)?)
    }

    /// Logits of one head applied to encoder features.
    pub fn head_on(
        &self,
        tape: &mut Tape,
        head: &HeadParams<NodeId>,
        features: NodeId,
    ) -> Result<NodeId, ModelError> {
        let x = tape.matmul(features, head.dense_w)?;
        let x = tape.add_bias(x, head.dense_b)?;
        let x = tape.gelu(x)?;
        let x = tape.layer_norm(x, head.ln_gain, head.ln_bias)?;
        let x = tape.matmul(x, head.out_w)?;
        Ok(tape.add_bias(x, head.out_b)?)
    }

    /// Combined logits of every head: `Σ_e head_e(phi(x))`, divided by the
    /// number of heads in [`EnsembleMode::Mean`].
    pub fn forward_ensemble_on(
        &self,
        tape: &mut Tape,
        bindings: &Bindings,
        ids: &[TokenId],
        batch: usize,
        len: usize,
    ) -> Result<NodeId, ModelError> {
        if bindings.heads.is_empty() {
            return Err(ModelError::NoHeads);
        }
        let features = self.encode_on(tape, &bindings.phi, ids, batch, len)?;
        let mut total = self.head_on(tape, &bindings.heads[0], features)?;
        for head in &bindings.heads[1..] {
            let logits = self.head_on(tape, head, features)?;
            total = tape.add(total, logits)?;
        }
        if self.ensemble == EnsembleMode::Mean && bindings.heads.len() > 1 {
            total = tape.scale(total, 1.0 / bindings.heads.len() as f32)?;
        }
        Ok(total)
    }

    pub fn encode(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let phi = params::bind_encoder(&self.phi, &mut tape);
        let out = self.encode_on(&mut tape, &phi, ids, batch, len)?;
        Ok(tape.to_tensor(out)?)
    }

    pub fn forward_ensemble(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let out = self.forward_ensemble_on(&mut tape, &b, ids, batch, len)?;
        Ok(tape.to_tensor(out)?)
    }

    /// Logits of head `e` alone.
    pub fn forward_head(&self, e: usize, ids: &[TokenId], batch: usize, len: usize) -> Result<Tensor, ModelError> {
        let head = self.head(e)?;
        let mut tape = Tape::new();
        let phi = params::bind_encoder(&self.phi, &mut tape);
        let hb = params::bind_head(head, &mut tape);
        let features = self.encode_on(&mut tape, &phi, ids, batch, len)?;
        let out = self.head_on(&mut tape, &hb, features)?;
        Ok(tape.to_tensor(out)?)
    }

    /// Baseline forward for a single-head model.
    pub fn forward_erm(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<Tensor, ModelError> {
        if self.heads.len() != 1 {
            return Err(ModelError::Config(format!(
                "ERM forward needs exactly one head, model has {}",
                self.heads.len()
            )));
        }
        self.forward_head(0, ids, batch, len)
    }
}

impl LanguageModel for InvariantModel {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.config.max_seq_len
    }

    fn logits(&self, ids: &[TokenId], batch: usize, len: usize) -> Result<Vec<f32>, ModelError> {
        Ok(self.forward_ensemble(ids, batch, len)?.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 11,
            embed_dim: 8,
            n_layers: 2,
            n_attn_heads: 2,
            ffn_dim: 12,
            max_seq_len: 6,
            seed: 5,
        }
    }

    fn ids() -> Vec<TokenId> {
        vec![3, 4, 1, 7, 9, 10, 5, 3, 8, 6, 4, 2]
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_attn_heads = 3;
        assert!(c.validate().is_err());
        assert!(matches!(
            init_model(&tiny_config(), 0, InitMode::Fresh),
            Err(ModelError::NoHeads)
        ));
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let c = tiny_config();
        let m = init_model(&c, 3, InitMode::Fresh).unwrap();
        // V=11, D=8, F=12, L=6, 2 layers
        // block = 4·8 + 4·(64+8) + (96+12) + (96+8) = 32 + 288 + 108 + 104 = 532
        // encoder = 88 + 48 + 2·532 + 16 = 1216; head = 64+8+16+88+11 = 187
        assert_eq!(c.param_counts(), (1216, 187));
        assert_eq!(m.n_params(), 1216 + 3 * 187);
        assert_eq!(m.head_weights_flat(1).unwrap().len(), 187);
    }

    #[test]
    fn shared_copy_heads_are_identical_and_fresh_are_not() {
        let c = tiny_config();
        let shared = init_model(&c, 3, InitMode::SharedHeadCopy).unwrap();
        assert_eq!(shared.heads()[0], shared.heads()[2]);
        let fresh = init_model(&c, 3, InitMode::Fresh).unwrap();
        assert_ne!(fresh.heads()[0], fresh.heads()[1]);
        // the template and encoder do not depend on the mode
        assert_eq!(fresh.phi(), shared.phi());
        assert_eq!(fresh.heads()[0], shared.heads()[0]);
        assert_eq!(init_model(&c, 3, InitMode::Fresh).unwrap(), fresh);
    }

    #[test]
    fn one_head_ensemble_is_erm_forward() {
        let m = init_model(&tiny_config(), 1, InitMode::SharedHeadCopy).unwrap();
        let a = m.forward_ensemble(&ids(), 2, 6).unwrap();
        let b = m.forward_erm(&ids(), 2, 6).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 6, 11]);
        assert_eq!(m.forward_erm(&ids(), 2, 6).unwrap(), b);
    }

    #[test]
    fn identical_heads_scale_logits() {
        for n in [2, 3] {
            let m = init_model(&tiny_config(), n, InitMode::SharedHeadCopy).unwrap();
            let ens = m.forward_ensemble(&ids(), 2, 6).unwrap();
            let one = m.forward_head(0, &ids(), 2, 6).unwrap();
            for (e, o) in ens.data().iter().zip(one.data()) {
                assert_eq!(*e, *o * n as f32);
            }
            let argmax = |row: &[f32]| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0
            };
            for (re, ro) in ens.data().chunks(11).zip(one.data().chunks(11)) {
                assert_eq!(argmax(re), argmax(ro));
            }
        }
    }

    #[test]
    fn mean_mode_divides_by_head_count() {
        let mut m = init_model(&tiny_config(), 2, InitMode::Fresh).unwrap();
        let sum = m.forward_ensemble(&ids(), 2, 6).unwrap();
        m.set_ensemble(EnsembleMode::Mean);
        let mean = m.forward_ensemble(&ids(), 2, 6).unwrap();
        for (s, a) in sum.data().iter().zip(mean.data()) {
            assert!((s * 0.5 - a).abs() < 1e-7);
        }
    }

    #[test]
    fn head_order_does_not_matter() {
        let m = init_model(&tiny_config(), 3, InitMode::Fresh).unwrap();
        let mut heads = m.heads().to_vec();
        heads.rotate_left(1);
        let rotated =
            InvariantModel::from_parts(m.config().clone(), m.ensemble(), m.phi().clone(), heads).unwrap();
        let a = m.forward_ensemble(&ids(), 2, 6).unwrap();
        let b = rotated.forward_ensemble(&ids(), 2, 6).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0));
        }
    }

    #[test]
    fn padding_does_not_leak_into_real_positions() {
        let m = init_model(&tiny_config(), 2, InitMode::Fresh).unwrap();
        let alone = m.encode(&[3, 4, 5, 6], 1, 4).unwrap();
        let padded = m
            .encode(&[3, 4, 5, 6, PAD, PAD, 7, 8, 9, 10, 3, 4], 2, 6)
            .unwrap();
        let d = 8;
        assert_eq!(&padded.data()[..4 * d], alone.data());
        let other_pad = m.encode(&[3, 4, 5, 6, PAD], 1, 5).unwrap();
        assert_eq!(&other_pad.data()[..4 * d], alone.data());
    }

    #[test]
    fn encoder_output_ignores_heads() {
        let a = init_model(&tiny_config(), 2, InitMode::Fresh).unwrap();
        let mut b = a.clone();
        b.head_params_mut(1).unwrap()[0].data_mut()[0] += 1.0;
        assert_eq!(a.encode(&ids(), 2, 6).unwrap(), b.encode(&ids(), 2, 6).unwrap());
        assert_ne!(
            a.forward_ensemble(&ids(), 2, 6).unwrap(),
            b.forward_ensemble(&ids(), 2, 6).unwrap()
        );
    }

    #[test]
    fn input_validation() {
        let m = init_model(&tiny_config(), 1, InitMode::Fresh).unwrap();
        assert!(matches!(
            m.encode(&[3, 11], 1, 2),
            Err(ModelError::TokenOutOfRange { id: 11, position: 1, .. })
        ));
        assert!(matches!(
            m.encode(&[3; 7], 1, 7),
            Err(ModelError::SequenceTooLong { len: 7, max: 6 })
        ));
        assert!(m.encode(&[3; 5], 2, 3).is_err());
        assert!(m.head_weights_flat(1).is_err());
    }

    #[test]
    fn two_hand_set_heads_sum_on_fixed_features() {
        let cfg = EncoderConfig {
            vocab_size: 3,
            embed_dim: 2,
            n_layers: 0,
            n_attn_heads: 1,
            ffn_dim: 1,
            max_seq_len: 1,
            seed: 0,
        };
        let model = init_model(&cfg, 2, InitMode::Fresh).unwrap();
        let p = |shape: Vec<usize>, data: Vec<f32>| Tensor::parameter(shape, data).unwrap();
        let head = |out_w: Vec<f32>, out_b: Vec<f32>| HeadParams {
            dense_w: p(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            dense_b: p(vec![2], vec![0.0, 0.0]),
            ln_gain: p(vec![2], vec![1.0, 1.0]),
            ln_bias: p(vec![2], vec![0.0, 0.0]),
            out_w: p(vec![2, 3], out_w),
            out_b: p(vec![3], out_b),
        };
        let heads = [
            head(vec![1.0, 2.0, 0.0, 0.0, -1.0, 3.0], vec![0.1, 0.0, -0.2]),
            head(vec![0.5, 0.0, 1.0, 2.0, 1.0, 0.0], vec![0.0, 0.3, 0.0]),
        ];
        let mut tape = Tape::new();
        let features = tape.constant(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let mut total = vec![0.0f32; 3];
        for h in &heads {
            let hb = params::bind_head(h, &mut tape);
            let out = model.head_on(&mut tape, &hb, features).unwrap();
            for (t, v) in total.iter_mut().zip(tape.value(out)) {
                *t += v;
            }
        }
        // gelu(2) = 2·Φ̃(2), gelu(0) = 0; layer norm of [g, 0] is [z, -z]
        let g = 0.5 * 2.0 * (1.0 + ((2.0f64 / std::f64::consts::PI).sqrt() * (2.0 + 0.044715 * 8.0)).tanh());
        let z = (g / 2.0) / ((g / 2.0).powi(2) + 1e-5).sqrt();
        let expected = [
            (z * 1.0 - z * 0.0 + 0.1) + (z * 0.5 - z * 2.0),
            (z * 2.0 + z * 1.0) + (z * 0.0 - z * 1.0 + 0.3),
            (z * 0.0 - z * 3.0 - 0.2) + (z * 1.0 - z * 0.0),
        ];
        for (t, e) in total.iter().zip(expected) {
            assert!((*t as f64 - e).abs() < 1e-5, "{t} vs {e}");
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig {
            vocab_size: 7,
            embed_dim: 4,
            n_layers: 1,
            n_attn_heads: 2,
            ffn_dim: 6,
            max_seq_len: 4,
            seed: 9,
        };
        let mut model = init_model(&cfg, 1, InitMode::Fresh).unwrap();
        // widen the projections so gradients are not all near zero
        let names: Vec<String> = model.phi.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(model.phi_params_mut()) {
            if name.contains(".w") || name.ends_with("_emb") {
                t.data_mut().iter_mut().for_each(|v| *v *= 15.0);
            }
        }
        let ids: Vec<TokenId> = vec![3, 4, 5, PAD, 6, 3, 4, 2];
        let weights: Vec<f32> = (0..2 * 4 * 4).map(|i| ((i * 7 % 11) as f32 - 5.0) / 5.0).collect();
        let loss = |m: &InvariantModel| -> (f32, Option<Vec<Vec<f32>>>) {
            let mut tape = Tape::new();
            let phi = params::bind_encoder(&m.phi, &mut tape);
            let out = m.encode_on(&mut tape, &phi, &ids, 2, 4).unwrap();
            let w = tape.constant(vec![2, 4, 4], weights.clone()).unwrap();
            let prod = tape.mul(out, w).unwrap();
            let l = tape.mean(prod).unwrap();
            let grads = tape.backward(l).unwrap();
            let g = phi
                .named()
                .iter()
                .map(|(_, id)| grads.get(**id).map(<[f32]>::to_vec).unwrap_or_default())
                .collect();
            (tape.value(l)[0], Some(g))
        };
        let (_, analytic) = loss(&model);
        let analytic = analytic.unwrap();
        let h = 1e-3f32;
        let n_params = model.phi.named().len();
        let (mut max_diff, mut max_mag) = (0.0f64, 0.0f64);
        for p in 0..n_params {
            let len = model.phi.named()[p].1.numel();
            for i in 0..len {
                let orig = model.phi.fields_mut()[p].data()[i];
                model.phi.fields_mut()[p].data_mut()[i] = orig + h;
                let up = loss(&model).0 as f64;
                model.phi.fields_mut()[p].data_mut()[i] = orig - h;
                let down = loss(&model).0 as f64;
                model.phi.fields_mut()[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h as f64);
                let a = analytic[p].get(i).copied().unwrap_or(0.0) as f64;
                max_diff = max_diff.max((a - numeric).abs());
                max_mag = max_mag.max(a.abs()).max(numeric.abs());
            }
        }
        assert!(max_mag > 1e-3);
        assert!(max_diff / max_mag < 1e-2, "relative error {}", max_diff / max_mag);
    }

    #[test]
    fn flat_head_weights_track_single_perturbation() {
        let mut m = init_model(&tiny_config(), 2, InitMode::SharedHeadCopy).unwrap();
        assert_eq!(m.head_weights_flat(0).unwrap(), m.head_weights_flat(1).unwrap());
        let before = m.head_weights_flat(1).unwrap();
        m.head_params_mut(1).unwrap()[4].data_mut()[3] += 0.5;
        let after = m.head_weights_flat(1).unwrap();
        let changed: Vec<usize> = (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        // out_w starts after dense_w (64), dense_b (8), ln_gain (8), ln_bias (8)
        assert_eq!(changed, vec![88 + 3]);
        assert!((after[91] - before[91] - 0.5).abs() < 1e-6);
    }
}
