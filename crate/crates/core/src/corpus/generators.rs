use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Environment, TokenId, Vocabulary};
use crate::rng;

/// Number of successors with non-zero probability in each generated row.
const SUCCESSORS: usize = 4;

/// Weight of the shared transition structure in each domain chain.
pub const DEFAULT_SHARED_MIX: f64 = 0.5;

/// A first-order Markov chain over a set of token ids with a uniform start
/// distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    states: Vec<TokenId>,
    transitions: Vec<Vec<f64>>,
}

fn sparse_row(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut row = vec![0.0; n];
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    for &j in idx.iter().take(SUCCESSORS.min(n)) {
        // exponential weights, floored so no successor is negligible
        row[j] = 0.1 - rng.random::<f64>().max(1e-12).ln();
    }
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|w| *w /= total);
    row
}

fn sample_index(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last state with mass
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

impl MarkovChain {
    /// Sparse random chain over `states`, fully determined by `seed`.
    pub fn from_seed(states: Vec<TokenId>, seed: u64) -> Result<Self, CorpusError> {
        if states.is_empty() {
            return Err(CorpusError::EmptyVocabulary);
        }
        let mut rng = rng::stream(seed, "markov-chain", &[]);
        let transitions = (0..states.len())
            .map(|_| sparse_row(states.len(), &mut rng))
            .collect();
        Ok(Self {
            states,
            transitions,
        })
    }

    pub fn from_matrix(states: Vec<TokenId>, transitions: Vec<Vec<f64>>) -> Result<Self, CorpusError> {
        let n = states.len();
        if n == 0 {
            return Err(CorpusError::EmptyVocabulary);
        }
        let ok = transitions.len() == n
            && transitions.iter().all(|row| {
                row.len() == n
                    && row.iter().all(|w| *w >= 0.0)
                    && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
            });
        if !ok {
            return Err(CorpusError::Config("transition matrix is not row-stochastic".into()));
        }
        Ok(Self {
            states,
            transitions,
        })
    }

    pub fn states(&self) -> &[TokenId] {
        &self.states
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut s = rng.random_range(0..self.states.len());
        out.push(self.states[s]);
        for _ in 1..len {
            s = sample_index(&self.transitions[s], rng);
            out.push(self.states[s]);
        }
        out
    }

    pub fn sample_corpus(&self, n: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<TokenId>> {
        (0..n).map(|_| self.sample(len, rng)).collect()
    }
}

/// The chain behind [`gen_clean_corpus`] for a given vocabulary and seed.
pub fn clean_chain(vocab: &Vocabulary, seed: u64) -> Result<MarkovChain, CorpusError> {
    MarkovChain::from_seed(vocab.content_ids(), rng::derive_seed(seed, "clean", &[]))
}

/// Sequences from a seeded Markov chain over the content tokens.
pub fn gen_clean_corpus(
    vocab: &Vocabulary,
    n_sentences: usize,
    seq_len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, CorpusError> {
    if seq_len < 2 {
        return Err(CorpusError::Config(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let chain = clean_chain(vocab, seed)?;
    let mut rng = rng::stream(seed, "clean-sample", &[]);
    Ok(chain.sample_corpus(n_sentences, seq_len, &mut rng))
}

/// Wraps content tokens in nested, matched open/close markup tags.
///
/// Each token receives a geometric number of wrapping layers with mean
/// `r / (2(1 - r))`, so the expected markup share of the output is `r`.
pub fn wrap_with_markup(
    sequences: &[Vec<TokenId>],
    vocab: &Vocabulary,
    markup_rate: f64,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, CorpusError> {
    if !(markup_rate > 0.0 && markup_rate < 1.0) {
        return Err(CorpusError::Config(format!(
            "markup_rate must lie in (0, 1), got {markup_rate}"
        )));
    }
    let tags = vocab.markup();
    if tags.len() < 2 {
        return Err(CorpusError::NotEnoughMarkup(tags.len()));
    }
    let n_tags = tags.len() / 2;
    let mean_layers = markup_rate / (2.0 * (1.0 - markup_rate));
    let cont = mean_layers / (1.0 + mean_layers);
    let mut rng = rng::stream(seed, "markup", &[]);
    let mut out = Vec::with_capacity(sequences.len());
    let mut stack = Vec::new();
    for seq in sequences {
        let mut wrapped = Vec::with_capacity(seq.len() * 2);
        for &tok in seq {
            while rng.random::<f64>() < cont {
                let t = rng.random_range(0..n_tags);
                wrapped.push(tags[2 * t]);
                stack.push(tags[2 * t + 1]);
            }
            wrapped.push(tok);
            while let Some(close) = stack.pop() {
                wrapped.push(close);
            }
        }
        out.push(wrapped);
    }
    Ok(out)
}

pub fn strip_markup(sequence: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    sequence.iter().copied().filter(|&t| !vocab.is_markup(t)).collect()
}

/// Exchanges the two members of every declared attribute pair.
pub fn swap_pairs(sequence: &[TokenId], vocab: &Vocabulary) -> Vec<TokenId> {
    sequence
        .iter()
        .map(|&t| match vocab.pair_of(t) {
            Some((k, true)) => vocab.pairs()[k].1,
            Some((k, false)) => vocab.pairs()[k].0,
            None => t,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSplitConfig {
    /// Fraction of sentences left untouched.
    pub p: f64,
    /// Probability that a context co-occurs with its preferred pair side.
    pub pair_bias: f64,
    pub n_contexts: usize,
    pub n_sentences: usize,
    pub seq_len: usize,
}

impl CorrelationSplitConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(CorpusError::Config(format!("p must lie in [0, 1], got {}", self.p)));
        }
        if !(self.pair_bias > 0.5 && self.pair_bias <= 1.0) {
            return Err(CorpusError::Config(format!(
                "pair_bias must lie in (0.5, 1], got {}",
                self.pair_bias
            )));
        }
        if self.seq_len < 2 || self.n_contexts == 0 {
            return Err(CorpusError::Config(
                "need seq_len >= 2 and at least one context".into(),
            ));
        }
        Ok(())
    }
}

/// Which tokens play context and filler roles in the correlation corpus.
///
/// Contexts are the first `n_contexts` non-pair content ids; context `k`
/// prefers the first pair member when `k` is even, the second otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationLayout {
    pub contexts: Vec<TokenId>,
    pub fillers: Vec<TokenId>,
}

impl CorrelationLayout {
    pub fn new(vocab: &Vocabulary, n_contexts: usize, seq_len: usize) -> Result<Self, CorpusError> {
        if vocab.pairs().is_empty() {
            return Err(CorpusError::NoPairs);
        }
        let plain = vocab.plain_content_ids();
        let need_fillers = usize::from(seq_len > 2);
        if plain.len() < n_contexts + need_fillers {
            return Err(CorpusError::SupportTooSmall(format!(
                "{} plain content tokens cannot supply {n_contexts} contexts and fillers",
                plain.len()
            )));
        }
        Ok(Self {
            contexts: plain[..n_contexts].to_vec(),
            fillers: plain[n_contexts..].to_vec(),
        })
    }

    /// `true` when context index `k` prefers the first pair member.
    pub fn prefers_first(k: usize) -> bool {
        k.is_multiple_of(2)
    }

    pub fn context_index(&self, id: TokenId) -> Option<usize> {
        self.contexts.iter().position(|&c| c == id)
    }
}

/// Template sentences `[context, filler.., attribute, filler..]` before any
/// split or swap.
pub fn gen_correlation_sentences(
    vocab: &Vocabulary,
    cfg: &CorrelationSplitConfig,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>, CorpusError> {
    cfg.validate()?;
    let layout = CorrelationLayout::new(vocab, cfg.n_contexts, cfg.seq_len)?;
    let pairs = vocab.pairs();
    let mut rng = rng::stream(seed, "correlation", &[]);
    let mut out = Vec::with_capacity(cfg.n_sentences);
    for _ in 0..cfg.n_sentences {
        let k = rng.random_range(0..layout.contexts.len());
        let pair = pairs[rng.random_range(0..pairs.len())];
        let preferred = rng.random::<f64>() < cfg.pair_bias;
        let first = CorrelationLayout::prefers_first(k) == preferred;
        let attribute = if first { pair.0 } else { pair.1 };
        let at = rng.random_range(1..cfg.seq_len);
        let mut s = Vec::with_capacity(cfg.seq_len);
        s.push(layout.contexts[k]);
        for pos in 1..cfg.seq_len {
            if pos == at {
                s.push(attribute);
            } else {
                s.push(layout.fillers[rng.random_range(0..layout.fillers.len())]);
            }
        }
        out.push(s);
    }
    Ok(out)
}

/// Seeded shuffle then prefix split: the first `ceil(p·N)` sentences stay
/// untouched, the rest are pair-swapped.
pub fn split_correlation(
    sentences: Vec<Vec<TokenId>>,
    vocab: &Vocabulary,
    p: f64,
    seed: u64,
) -> (Environment, Environment) {
    let n = sentences.len();
    let n_a = ((p * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "correlation-split", &[]));
    let mut a = Vec::with_capacity(n_a);
    let mut b = Vec::with_capacity(n - n_a);
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_a {
            a.push(sentences[i].clone());
        } else {
            b.push(swap_pairs(&sentences[i], vocab));
        }
    }
    (
        Environment::new(0, "original", a),
        Environment::new(1, "swapped", b),
    )
}

pub fn gen_correlation_corpus(
    vocab: &Vocabulary,
    cfg: &CorrelationSplitConfig,
    seed: u64,
) -> Result<(Environment, Environment), CorpusError> {
    let sentences = gen_correlation_sentences(vocab, cfg, seed)?;
    Ok(split_correlation(sentences, vocab, cfg.p, seed))
}

/// Token supports of the generated domains.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLayout {
    pub core: Vec<TokenId>,
    pub private: Vec<Vec<TokenId>>,
}

impl DomainLayout {
    /// Largest support size `S` with `overlap·S` shared core tokens and
    /// disjoint private remainders.
    pub fn new(vocab: &Vocabulary, n_domains: usize, overlap: f64, seed: u64) -> Result<Self, CorpusError> {
        if n_domains < 2 {
            return Err(CorpusError::Config(format!("need at least 2 domains, got {n_domains}")));
        }
        if !(0.0..=1.0).contains(&overlap) {
            return Err(CorpusError::Config(format!("overlap must lie in [0, 1], got {overlap}")));
        }
        let mut tokens = vocab.content_ids();
        if tokens.is_empty() {
            return Err(CorpusError::EmptyVocabulary);
        }
        tokens.shuffle(&mut rng::stream(seed, "domain-support", &[]));
        let n = tokens.len() as f64;
        let support = (n / (overlap + n_domains as f64 * (1.0 - overlap))).floor() as usize;
        let core = ((overlap * support as f64).round() as usize).min(support);
        let private = support - core;
        if support < 2 || core + n_domains * private > tokens.len() {
            return Err(CorpusError::SupportTooSmall(format!(
                "{} content tokens give a per-domain support of {support}",
                tokens.len()
            )));
        }
        Ok(Self {
            core: tokens[..core].to_vec(),
            private: (0..n_domains)
                .map(|d| tokens[core + d * private..core + (d + 1) * private].to_vec())
                .collect(),
        })
    }

    pub fn support(&self, domain: usize) -> Vec<TokenId> {
        let mut s = self.core.clone();
        s.extend_from_slice(&self.private[domain]);
        s.sort_unstable();
        s
    }
}

/// Domain chain: a mixture of a global chain restricted to the domain's
/// support and a domain-specific chain.
fn domain_chain(
    vocab: &Vocabulary,
    support: Vec<TokenId>,
    shared_mix: f64,
    seed: u64,
    domain: usize,
) -> Result<MarkovChain, CorpusError> {
    let shared = MarkovChain::from_seed(vocab.content_ids(), rng::derive_seed(seed, "domain-shared", &[]))?;
    let own = MarkovChain::from_seed(
        support.clone(),
        rng::derive_seed(seed, "domain-own", &[domain as u64]),
    )?;
    let offset = vocab.content_ids()[0] as usize;
    let rows = support
        .iter()
        .enumerate()
        .map(|(i, &from)| {
            let shared_row = &shared.transitions()[from as usize - offset];
            let restricted: Vec<f64> = support
                .iter()
                .map(|&to| shared_row[to as usize - offset])
                .collect();
            let mass: f64 = restricted.iter().sum();
            let own_row = &own.transitions()[i];
            if mass <= 0.0 {
                return own_row.clone();
            }
            restricted
                .iter()
                .zip(own_row)
                .map(|(s, o)| shared_mix * s / mass + (1.0 - shared_mix) * o)
                .collect()
        })
        .collect();
    MarkovChain::from_matrix(support, rows)
}

pub fn gen_domain_envs(
    vocab: &Vocabulary,
    n_domains: usize,
    n_sentences: usize,
    seq_len: usize,
    overlap: f64,
    seed: u64,
) -> Result<Vec<Environment>, CorpusError> {
    gen_domain_envs_with(vocab, n_domains, n_sentences, seq_len, overlap, DEFAULT_SHARED_MIX, seed)
}

/// [`gen_domain_envs`] with an explicit weight for the shared chain.
pub fn gen_domain_envs_with(
    vocab: &Vocabulary,
    n_domains: usize,
    n_sentences: usize,
    seq_len: usize,
    overlap: f64,
    shared_mix: f64,
    seed: u64,
) -> Result<Vec<Environment>, CorpusError> {
    if !(0.0..=1.0).contains(&shared_mix) {
        return Err(CorpusError::Config(format!("shared_mix must lie in [0, 1], got {shared_mix}")));
    }
    if seq_len < 2 {
        return Err(CorpusError::Config(format!("seq_len must be at least 2, got {seq_len}")));
    }
    let layout = DomainLayout::new(vocab, n_domains, overlap, seed)?;
    (0..n_domains)
        .map(|d| {
            let chain = domain_chain(vocab, layout.support(d), shared_mix, seed, d)?;
            let mut rng = rng::stream(seed, "domain-sample", &[d as u64]);
            Ok(Environment::new(
                d,
                format!("domain-{d}"),
                chain.sample_corpus(n_sentences, seq_len, &mut rng),
            ))
        })
        .collect()
}
