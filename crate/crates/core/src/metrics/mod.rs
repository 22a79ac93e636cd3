//! Evaluation: perplexity, entropy bias, head distances, bootstrap
//! statistics, paired win probability and classical MDS.

mod mds;
mod records;
mod stats;

pub use mds::classical_mds;
pub use records::{metrics_csv_bytes, read_metrics_csv, write_mds_csv, write_metrics_csv, MdsRow, MetricsRecord, METRICS_HEADER};
pub use stats::{bootstrap_ci, mean, paired_win_probability, percentile};

use thiserror::Error;

use crate::corpus::{mask_tokens, TokenId, Vocabulary, MASK};
use crate::model::{InvariantModel, LanguageModel, ModelError};
use crate::rng;
use crate::tensor::IGNORE_INDEX;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{0} is outside [0, 1]")]
    Probability(f64),
    #[error("no masked positions to score")]
    EmptySelection,
    #[error("no attribute-pair occurrences in the test set")]
    NoPairOccurrences,
    #[error("invalid matrix: {0}")]
    Matrix(String),
    #[error("invalid grouping: {0}")]
    Grouping(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{0}")]
    Csv(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Sequences scored per forward pass.
const EVAL_BATCH: usize = 32;

fn crop(seq: &[TokenId], max: usize) -> &[TokenId] {
    &seq[..seq.len().min(max)]
}

/// `exp` of the mean masked cross-entropy over a seeded masked view of
/// `sequences`. The same seed yields the same masked view for every model.
pub fn perplexity<M: LanguageModel + ?Sized>(
    model: &M,
    sequences: &[Vec<TokenId>],
    vocab: &Vocabulary,
    mask_rate: f64,
    seed: u64,
) -> Result<f64, MetricsError> {
    if sequences.is_empty() {
        return Err(MetricsError::Empty("test set"));
    }
    let v = model.vocab_size();
    let (mut total, mut count) = (0.0f64, 0usize);
    for (chunk_idx, chunk) in sequences.chunks(EVAL_BATCH).enumerate() {
        let rows: Vec<Vec<TokenId>> = chunk.iter().map(|s| crop(s, model.max_seq_len()).to_vec()).collect();
        let mut mask_rng = rng::stream(seed, "eval-mask", &[chunk_idx as u64]);
        let batch = mask_tokens(&rows, vocab, mask_rate, 0, &mut mask_rng)?;
        let logits = model.logits(&batch.input_ids, batch.batch_size, batch.seq_len)?;
        for (pos, &t) in batch.targets.iter().enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            let row = &logits[pos * v..(pos + 1) * v];
            total -= log_softmax_at(row, t as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::EmptySelection);
    }
    Ok((total / count as f64).exp())
}

fn log_softmax_at(row: &[f32], index: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    row[index] as f64 - lse
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let exps: Vec<f64> = row.iter().map(|&x| (x as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `H₂(q)` in bits, with `0 · log 0 = 0`.
pub fn binary_entropy(q: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(MetricsError::Probability(q));
    }
    let term = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.log2() };
    Ok((term(q) + term(1.0 - q)).clamp(0.0, 1.0))
}

/// `1 − H₂(s_f / (s_f + s_m))` for one scored position.
pub fn entropy_bias_of(s_f: f64, s_m: f64) -> Result<f64, MetricsError> {
    if !(s_f >= 0.0 && s_m >= 0.0 && s_f + s_m > 0.0) {
        return Err(MetricsError::Argument(format!("invalid pair scores ({s_f}, {s_m})")));
    }
    Ok(1.0 - binary_entropy(s_f / (s_f + s_m))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyBias {
    pub mean: f64,
    /// One value per scored occurrence, in test-set order.
    pub values: Vec<f64>,
    /// Occurrences where both pair tokens had zero probability.
    pub skipped: usize,
}

/// Mean entropy bias over score pairs; zero-mass pairs are skipped and counted.
pub fn entropy_bias_from_scores(scores: &[(f64, f64)]) -> Result<EntropyBias, MetricsError> {
    let mut values = Vec::with_capacity(scores.len());
    let mut skipped = 0;
    for &(f, m) in scores {
        if f + m == 0.0 {
            skipped += 1;
            continue;
        }
        values.push(entropy_bias_of(f, m)?);
    }
    if values.is_empty() {
        return Err(MetricsError::NoPairOccurrences);
    }
    Ok(EntropyBias {
        mean: mean(&values),
        values,
        skipped,
    })
}

/// Masks every attribute-pair occurrence one at a time and reads the
/// model's probabilities for both tokens of that pair.
pub fn pair_scores<M: LanguageModel + ?Sized>(
    model: &M,
    sequences: &[Vec<TokenId>],
    vocab: &Vocabulary,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    struct Query {
        row: Vec<TokenId>,
        pos: usize,
        pair: (TokenId, TokenId),
    }
    let mut queries = Vec::new();
    for seq in sequences {
        let seq = crop(seq, model.max_seq_len());
        for (pos, &t) in seq.iter().enumerate() {
            if let Some((k, _)) = vocab.pair_of(t) {
                let mut row = seq.to_vec();
                row[pos] = MASK;
                queries.push(Query {
                    row,
                    pos,
                    pair: vocab.pairs()[k],
                });
            }
        }
    }
    if queries.is_empty() {
        return Err(MetricsError::NoPairOccurrences);
    }
    let v = model.vocab_size();
    let mut scores = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(EVAL_BATCH) {
        let len = chunk.iter().map(|q| q.row.len()).max().unwrap_or(1);
        let mut ids = vec![crate::corpus::PAD; chunk.len() * len];
        for (i, q) in chunk.iter().enumerate() {
            ids[i * len..i * len + q.row.len()].copy_from_slice(&q.row);
        }
        let logits = model.logits(&ids, chunk.len(), len)?;
        for (i, q) in chunk.iter().enumerate() {
            let at = (i * len + q.pos) * v;
            let p = softmax(&logits[at..at + v]);
            scores.push((p[q.pair.0 as usize], p[q.pair.1 as usize]));
        }
    }
    Ok(scores)
}

/// Mean entropy bias over every attribute-pair occurrence in `sequences`.
pub fn entropy_bias<M: LanguageModel + ?Sized>(
    model: &M,
    sequences: &[Vec<TokenId>],
    vocab: &Vocabulary,
) -> Result<EntropyBias, MetricsError> {
    let scores = pair_scores(model, sequences, vocab)?;
    let out = entropy_bias_from_scores(&scores)?;
    if out.skipped > 0 {
        log::warn!("{} pair occurrences had zero probability mass and were skipped", out.skipped);
    }
    Ok(out)
}

/// Pairwise L2 distances between flattened head weights.
pub fn head_distances(model: &InvariantModel) -> Result<Vec<Vec<f64>>, MetricsError> {
    let flats = (0..model.n_heads())
        .map(|e| model.head_weights_flat(e))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(distance_matrix(&flats))
}

/// Pairwise Euclidean distances between equal-length vectors.
pub fn distance_matrix(vectors: &[Vec<f32>]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| {
                    let x = *a as f64 - *b as f64;
                    x * x
                })
                .sum();
            d[i][j] = s.sqrt();
            d[j][i] = d[i][j];
        }
    }
    d
}

pub(crate) fn check_distance_matrix(d: &[Vec<f64>]) -> Result<(), MetricsError> {
    let n = d.len();
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(MetricsError::Matrix(format!("row {i} has length {}, expected {n}", row.len())));
        }
        if row[i] != 0.0 {
            return Err(MetricsError::Matrix(format!("non-zero diagonal at {i}")));
        }
        for (j, &x) in row.iter().enumerate() {
            if !x.is_finite() || x < 0.0 {
                return Err(MetricsError::Matrix(format!("entry ({i}, {j}) = {x}")));
            }
            if (x - d[j][i]).abs() > 1e-9 * x.abs().max(1.0) {
                return Err(MetricsError::Matrix(format!("not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Mean within-domain and mean cross-domain head distance.
///
/// `grouping[e]` is the domain label of environment `e`. Every label must
/// appear at least twice and there must be at least two labels.
pub fn d_in_d_out<L: Ord>(dist: &[Vec<f64>], grouping: &[L]) -> Result<(f64, f64), MetricsError> {
    check_distance_matrix(dist)?;
    if grouping.len() != dist.len() {
        return Err(MetricsError::Grouping(format!(
            "{} labels for {} environments",
            grouping.len(),
            dist.len()
        )));
    }
    let mut counts = std::collections::BTreeMap::new();
    for l in grouping {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(MetricsError::Grouping("need at least two domains".into()));
    }
    if counts.values().any(|&c| c < 2) {
        return Err(MetricsError::Grouping("every domain needs at least two environments".into()));
    }
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..dist.len() {
        for j in i + 1..dist.len() {
            if grouping[i] == grouping[j] {
                sin += dist[i][j];
                nin += 1;
            } else {
                sout += dist[i][j];
                nout += 1;
            }
        }
    }
    Ok((sin / nin as f64, sout / nout as f64))
}
