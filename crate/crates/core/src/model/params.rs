//! Parameter containers, generic over the leaf type so the same layout
//! holds owned tensors and their tape bindings.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::EncoderConfig;
use crate::tensor::{Tape, Tensor};

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Shared body: token and position embeddings, pre-norm transformer blocks
/// and a final layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gain: T,
    pub final_bias: T,
}

/// One environment head: dense + GELU + layer norm, then the vocabulary
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub dense_w: T,
    pub dense_b: T,
    pub ln_gain: T,
    pub ln_bias: T,
    pub out_w: T,
    pub out_b: T,
}

impl<T> BlockParams<T> {
    fn named(&self) -> [(&'static str, &T); 16] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        Some(Self {
            ln1_gain: it.next()?,
            ln1_bias: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gain: it.next()?,
            ln2_bias: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }
}

impl<T> EncoderParams<T> {
    /// Parameters with dotted names in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out
    }

    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn from_fields(n_blocks: usize, mut it: impl Iterator<Item = T>) -> Option<Self> {
        let tok_emb = it.next()?;
        let pos_emb = it.next()?;
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            blocks.push(BlockParams::from_fields(&mut it)?);
        }
        let out = Self {
            tok_emb,
            pos_emb,
            blocks,
            final_gain: it.next()?,
            final_bias: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EncoderParams<U> {
        let n = self.blocks.len();
        let mapped: Vec<U> = self.named().into_iter().map(|(_, t)| f(t)).collect();
        EncoderParams::from_fields(n, mapped.into_iter()).expect("field count is fixed")
    }
}

impl<T> HeadParams<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        vec![
            ("dense_w".into(), &self.dense_w),
            ("dense_b".into(), &self.dense_b),
            ("ln_gain".into(), &self.ln_gain),
            ("ln_bias".into(), &self.ln_bias),
            ("out_w".into(), &self.out_w),
            ("out_b".into(), &self.out_b),
        ]
    }

    pub fn fields_mut(&mut self) -> Vec<&mut T> {
        vec![
            &mut self.dense_w,
            &mut self.dense_b,
            &mut self.ln_gain,
            &mut self.ln_bias,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn from_fields(mut it: impl Iterator<Item = T>) -> Option<Self> {
        let out = Self {
            dense_w: it.next()?,
            dense_b: it.next()?,
            ln_gain: it.next()?,
            ln_bias: it.next()?,
            out_w: it.next()?,
            out_b: it.next()?,
        };
        it.next().is_none().then_some(out)
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> HeadParams<U> {
        let mapped: Vec<U> = self.named().into_iter().map(|(_, t)| f(t)).collect();
        HeadParams::from_fields(mapped.into_iter()).expect("field count is fixed")
    }
}

pub(crate) fn bind_encoder(p: &EncoderParams<Tensor>, tape: &mut Tape) -> EncoderParams<crate::tensor::NodeId> {
    p.map(|t| tape.leaf(t))
}

pub(crate) fn bind_head(p: &HeadParams<Tensor>, tape: &mut Tape) -> HeadParams<crate::tensor::NodeId> {
    p.map(|t| tape.leaf(t))
}

struct Init<'a, R: Rng> {
    rng: &'a mut R,
    normal: Normal<f32>,
}

impl<R: Rng> Init<'_, R> {
    fn gaussian(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(self.rng)).collect();
        Tensor::parameter(shape, data).expect("finite gaussian draws")
    }

    fn constant(&mut self, shape: Vec<usize>, value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::parameter(shape, vec![value; n]).expect("finite constant")
    }
}

fn init<R: Rng>(rng: &mut R) -> Init<'_, R> {
    Init {
        rng,
        normal: Normal::new(0.0, INIT_STD).expect("valid std"),
    }
}

pub(crate) fn init_encoder<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> EncoderParams<Tensor> {
    let (v, d, f) = (cfg.vocab_size, cfg.embed_dim, cfg.ffn_dim);
    let mut i = init(rng);
    let tok_emb = i.gaussian(vec![v, d]);
    let pos_emb = i.gaussian(vec![cfg.max_seq_len, d]);
    let blocks = (0..cfg.n_layers)
        .map(|_| BlockParams {
            ln1_gain: i.constant(vec![d], 1.0),
            ln1_bias: i.constant(vec![d], 0.0),
            wq: i.gaussian(vec![d, d]),
            bq: i.constant(vec![d], 0.0),
            wk: i.gaussian(vec![d, d]),
            bk: i.constant(vec![d], 0.0),
            wv: i.gaussian(vec![d, d]),
            bv: i.constant(vec![d], 0.0),
            wo: i.gaussian(vec![d, d]),
            bo: i.constant(vec![d], 0.0),
            ln2_gain: i.constant(vec![d], 1.0),
            ln2_bias: i.constant(vec![d], 0.0),
            w1: i.gaussian(vec![d, f]),
            b1: i.constant(vec![f], 0.0),
            w2: i.gaussian(vec![f, d]),
            b2: i.constant(vec![d], 0.0),
        })
        .collect();
    EncoderParams {
        tok_emb,
        pos_emb,
        blocks,
        final_gain: i.constant(vec![d], 1.0),
        final_bias: i.constant(vec![d], 0.0),
    }
}

pub(crate) fn init_head<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> HeadParams<Tensor> {
    let (v, d) = (cfg.vocab_size, cfg.embed_dim);
    let mut i = init(rng);
    HeadParams {
        dense_w: i.gaussian(vec![d, d]),
        dense_b: i.constant(vec![d], 0.0),
        ln_gain: i.constant(vec![d], 1.0),
        ln_bias: i.constant(vec![d], 0.0),
        out_w: i.gaussian(vec![d, v]),
        out_b: i.constant(vec![v], 0.0),
    }
}
