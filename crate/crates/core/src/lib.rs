//! Invariant masked language modeling.
//!
//! A shared transformer encoder is trained together with one prediction head
//! per data environment. Environments take turns sending a batch; each step
//! updates the encoder and only the head owned by the active environment,
//! while the forward pass always sums the logits of every head.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f32` tensors, a recording tape for reverse-mode
//!   differentiation, and Adam.
//! * [`corpus`]: synthetic vocabularies, environment generators and masking.
//! * [`model`]: the encoder, environment heads and checkpoints.
//! * [`training`]: the round-robin schedule and the single-head baseline.
//! * [`metrics`]: perplexity, entropy bias, head distances, bootstrap
//!   statistics and classical MDS.
//! * [`harness`]: experiment configs, run manifests and the `ilm` CLI commands.

pub mod corpus;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
