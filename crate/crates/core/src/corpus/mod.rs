//! Synthetic vocabularies, environments and masked-LM batches.
//!
//! Three environment contrasts are generated:
//!
//! * clean Markov text versus the same text wrapped in matched markup tags,
//! * an attribute-pair correlation corpus split into an untouched part and a
//!   part whose pair tokens are all swapped,
//! * several domains with partially overlapping token supports.

mod generators;
mod io;
mod masking;
mod vocab;

pub use generators::{
    clean_chain, gen_clean_corpus, gen_correlation_corpus, gen_correlation_sentences, gen_domain_envs,
    gen_domain_envs_with, split_correlation, strip_markup, swap_pairs, wrap_with_markup,
    CorrelationLayout, CorrelationSplitConfig, DomainLayout, MarkovChain, DEFAULT_SHARED_MIX,
};
pub use io::{read_environment, read_vocabulary, write_environment, write_json_atomic, write_vocabulary, EnvironmentFile, VocabularyFile};
pub use masking::{mask_tokens, MaskedBatch};
pub(crate) use io::write_bytes_atomic;
pub use vocab::{build_vocabulary, TokenId, Vocabulary, MASK, PAD, UNK};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid vocabulary counts: {0}")]
    VocabularyCounts(String),
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("vocabulary has no content tokens")]
    EmptyVocabulary,
    #[error("vocabulary declares no attribute pairs")]
    NoPairs,
    #[error("need at least 2 markup tokens, vocabulary has {0}")]
    NotEnoughMarkup(usize),
    #[error("token support too small: {0}")]
    SupportTooSmall(String),
    #[error("batch has no maskable positions")]
    NoEligiblePositions,
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(TokenId),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
}

/// An indexed stream of token sequences drawn from one distribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub env_id: usize,
    pub descriptor: String,
    pub sequences: Vec<Vec<TokenId>>,
}

impl Environment {
    pub fn new(env_id: usize, descriptor: impl Into<String>, sequences: Vec<Vec<TokenId>>) -> Self {
        Self {
            env_id,
            descriptor: descriptor.into(),
            sequences,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), CorpusError> {
        for seq in &self.sequences {
            if let Some(&bad) = seq.iter().find(|&&t| !vocab.contains_id(t)) {
                return Err(CorpusError::UnknownToken(bad));
            }
        }
        Ok(())
    }
}

/// Checks that environment ids are exactly `0..n` in order.
pub fn check_env_ids(envs: &[Environment]) -> Result<(), CorpusError> {
    for (i, e) in envs.iter().enumerate() {
        if e.env_id != i {
            return Err(CorpusError::Config(format!(
                "environment at position {i} has id {}",
                e.env_id
            )));
        }
    }
    Ok(())
}
