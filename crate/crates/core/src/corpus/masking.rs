use rand::Rng;

use super::{CorpusError, TokenId, Vocabulary, MASK, PAD};
use crate::tensor::IGNORE_INDEX;

/// A padded `B×L` batch of masked inputs and prediction targets.
///
/// `targets` holds the original token at selected positions and
/// [`IGNORE_INDEX`] everywhere else.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<TokenId>,
    pub targets: Vec<i64>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub env_id: usize,
}

impl MaskedBatch {
    pub fn n_selected(&self) -> usize {
        self.targets.iter().filter(|&&t| t != IGNORE_INDEX).count()
    }

    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.input_ids[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// BERT-style masking.
///
/// Every non-special position is selected independently with probability
/// `mask_rate`; a selected position becomes `MASK` (80%), a random content
/// token (10%) or stays as is (10%). If nothing is selected, one eligible
/// position is force-selected uniformly. Rows are right-padded with `PAD`.
pub fn mask_tokens<R: Rng>(
    sequences: &[Vec<TokenId>],
    vocab: &Vocabulary,
    mask_rate: f64,
    env_id: usize,
    rng: &mut R,
) -> Result<MaskedBatch, CorpusError> {
    if !(mask_rate > 0.0 && mask_rate < 1.0) {
        return Err(CorpusError::Config(format!(
            "mask_rate must lie in (0, 1), got {mask_rate}"
        )));
    }
    let content = vocab.content_ids();
    if content.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let batch_size = sequences.len();
    let seq_len = sequences.iter().map(Vec::len).max().unwrap_or(0);
    let mut input_ids = vec![PAD; batch_size * seq_len];
    let mut targets = vec![IGNORE_INDEX; batch_size * seq_len];
    let mut eligible = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        for (j, &t) in seq.iter().enumerate() {
            input_ids[i * seq_len + j] = t;
            if !vocab.is_special(t) {
                eligible.push(i * seq_len + j);
            }
        }
    }
    if eligible.is_empty() {
        return Err(CorpusError::NoEligiblePositions);
    }

    let corrupt = |at: usize, input_ids: &mut [TokenId], targets: &mut [i64], rng: &mut R| {
        targets[at] = input_ids[at] as i64;
        let r: f64 = rng.random();
        if r < 0.8 {
            input_ids[at] = MASK;
        } else if r < 0.9 {
            input_ids[at] = content[rng.random_range(0..content.len())];
        }
    };

    let mut any = false;
    for &at in &eligible {
        if rng.random::<f64>() < mask_rate {
            corrupt(at, &mut input_ids, &mut targets, rng);
            any = true;
        }
    }
    if !any {
        let at = eligible[rng.random_range(0..eligible.len())];
        corrupt(at, &mut input_ids, &mut targets, rng);
    }
    Ok(MaskedBatch {
        input_ids,
        targets,
        batch_size,
        seq_len,
        env_id,
    })
}
