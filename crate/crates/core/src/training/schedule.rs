use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::{mask_tokens, Environment, MaskedBatch, TokenId, Vocabulary};
use crate::rng;

/// How batches are drawn from the training environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// One batch per environment in turn.
    #[default]
    RoundRobin,
    /// Every batch comes from the concatenation of all environments, so each
    /// environment contributes in proportion to its size. Single-head only.
    Pooled,
}

#[derive(Debug, Clone)]
struct Cursor {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cursor {
    fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut c = Self {
            len,
            order: (0..len).collect(),
            pos: 0,
            rng,
        };
        c.order.shuffle(&mut c.rng);
        c
    }

    /// Next `n` indices: walks seeded shuffled epochs, or samples with
    /// replacement when the source is smaller than the batch.
    fn take(&mut self, n: usize) -> Vec<usize> {
        if n > self.len {
            return (0..n).map(|_| self.rng.random_range(0..self.len)).collect();
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.len {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Yields one masked batch per training step.
///
/// Round-robin mode visits environments `0..n` in every cycle (or a seeded
/// permutation of them with `shuffle_env_order`). The mask for step `t` is
/// drawn from its own stream, so a batch depends only on the seed and the
/// number of steps drawn before it.
#[derive(Debug, Clone)]
pub struct BatchScheduler<'a> {
    envs: &'a [Environment],
    vocab: &'a Vocabulary,
    batch_size: usize,
    mask_rate: f64,
    seed: u64,
    max_seq_len: usize,
    sampling: Sampling,
    shuffle_env_order: bool,
    cursors: Vec<Cursor>,
    pooled_index: Vec<(usize, usize)>,
    cycle_order: Vec<usize>,
    step: u64,
}

impl<'a> BatchScheduler<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        envs: &'a [Environment],
        vocab: &'a Vocabulary,
        batch_size: usize,
        mask_rate: f64,
        seed: u64,
        max_seq_len: usize,
        sampling: Sampling,
        shuffle_env_order: bool,
    ) -> Result<Self, TrainError> {
        if envs.is_empty() {
            return Err(TrainError::Config("no training environments".into()));
        }
        if batch_size == 0 || max_seq_len == 0 {
            return Err(TrainError::Config("batch_size and max_seq_len must be positive".into()));
        }
        for (i, e) in envs.iter().enumerate() {
            if e.is_empty() {
                return Err(TrainError::EmptyEnvironment(i));
            }
        }
        let pooled_index: Vec<(usize, usize)> = match sampling {
            Sampling::Pooled => envs
                .iter()
                .enumerate()
                .flat_map(|(e, env)| (0..env.len()).map(move |i| (e, i)))
                .collect(),
            Sampling::RoundRobin => Vec::new(),
        };
        let cursors = match sampling {
            Sampling::RoundRobin => envs
                .iter()
                .enumerate()
                .map(|(e, env)| Cursor::new(env.len(), rng::stream(seed, "env", &[e as u64])))
                .collect(),
            Sampling::Pooled => vec![Cursor::new(pooled_index.len(), rng::stream(seed, "pooled", &[]))],
        };
        for (i, c) in cursors.iter().enumerate() {
            if batch_size > c.len {
                warn!(
                    "batch size {batch_size} exceeds source {i} size {}; sampling with replacement",
                    c.len
                );
            }
        }
        Ok(Self {
            envs,
            vocab,
            batch_size,
            mask_rate,
            seed,
            max_seq_len,
            sampling,
            shuffle_env_order,
            cursors,
            pooled_index,
            cycle_order: (0..envs.len()).collect(),
            step: 0,
        })
    }

    pub fn n_envs(&self) -> usize {
        self.envs.len()
    }

    /// Number of batches drawn so far.
    pub fn steps_drawn(&self) -> u64 {
        self.step
    }

    fn env_for_step(&mut self, step: u64) -> usize {
        let n = self.envs.len() as u64;
        let pos = (step % n) as usize;
        if pos == 0 && self.shuffle_env_order {
            self.cycle_order = (0..self.envs.len()).collect();
            self.cycle_order
                .shuffle(&mut rng::stream(self.seed, "env-order", &[step / n]));
        }
        self.cycle_order[pos]
    }

    fn crop(&self, seq: &[TokenId]) -> Vec<TokenId> {
        seq[..seq.len().min(self.max_seq_len)].to_vec()
    }

    pub fn next_batch(&mut self) -> Result<MaskedBatch, TrainError> {
        let step = self.step;
        let (env_id, sequences) = match self.sampling {
            Sampling::RoundRobin => {
                let e = self.env_for_step(step);
                let idx = self.cursors[e].take(self.batch_size);
                let seqs: Vec<Vec<TokenId>> = idx.iter().map(|&i| self.crop(&self.envs[e].sequences[i])).collect();
                (e, seqs)
            }
            Sampling::Pooled => {
                let idx = self.cursors[0].take(self.batch_size);
                let seqs: Vec<Vec<TokenId>> = idx
                    .iter()
                    .map(|&i| {
                        let (e, j) = self.pooled_index[i];
                        self.crop(&self.envs[e].sequences[j])
                    })
                    .collect();
                (0, seqs)
            }
        };
        let mut mask_rng = rng::stream(self.seed, "mask", &[step]);
        let batch = mask_tokens(&sequences, self.vocab, self.mask_rate, env_id, &mut mask_rng)?;
        self.step += 1;
        Ok(batch)
    }
}

impl Iterator for BatchScheduler<'_> {
    type Item = Result<MaskedBatch, TrainError>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}

/// Round-robin scheduler with default settings.
pub fn batch_scheduler<'a>(
    envs: &'a [Environment],
    vocab: &'a Vocabulary,
    batch_size: usize,
    seed: u64,
) -> Result<BatchScheduler<'a>, TrainError> {
    let max_len = envs
        .iter()
        .flat_map(|e| e.sequences.iter().map(Vec::len))
        .max()
        .unwrap_or(1)
        .max(1);
    BatchScheduler::new(envs, vocab, batch_size, 0.15, seed, max_len, Sampling::RoundRobin, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, gen_clean_corpus};

    fn setup(sizes: &[usize]) -> (Vocabulary, Vec<Environment>) {
        let vocab = build_vocabulary(12, 0, 0, 1).unwrap();
        let envs = sizes
            .iter()
            .enumerate()
            .map(|(e, &n)| Environment::new(e, "clean", gen_clean_corpus(&vocab, n, 6, e as u64).unwrap()))
            .collect();
        (vocab, envs)
    }

    #[test]
    fn round_robin_cycles_through_environments() {
        let (vocab, envs) = setup(&[10, 7, 5]);
        let ids: Vec<usize> = batch_scheduler(&envs, &vocab, 4, 3)
            .unwrap()
            .take(9)
            .map(|b| b.unwrap().env_id)
            .collect();
        assert_eq!(ids, vec![0, 1, 2, 0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn shuffled_order_visits_each_env_once_per_cycle() {
        let (vocab, envs) = setup(&[10, 7, 5, 6]);
        let mut s = BatchScheduler::new(&envs, &vocab, 2, 0.15, 8, 6, Sampling::RoundRobin, true).unwrap();
        let mut saw_non_identity = false;
        for _ in 0..10 {
            let mut cycle: Vec<usize> = (0..4).map(|_| s.next_batch().unwrap().env_id).collect();
            saw_non_identity |= cycle != vec![0, 1, 2, 3];
            cycle.sort();
            assert_eq!(cycle, vec![0, 1, 2, 3]);
        }
        assert!(saw_non_identity);
    }

    #[test]
    fn epoch_covers_every_sequence_once() {
        let (vocab, envs) = setup(&[12]);
        let mut s = batch_scheduler(&envs, &vocab, 4, 0).unwrap();
        let mut rows = Vec::new();
        for _ in 0..3 {
            let b = s.next_batch().unwrap();
            for i in 0..b.batch_size {
                let mut row: Vec<TokenId> = b.row(i).to_vec();
                for (j, t) in b.targets[i * b.seq_len..(i + 1) * b.seq_len].iter().enumerate() {
                    if *t >= 0 {
                        row[j] = *t as TokenId;
                    }
                }
                rows.push(row);
            }
        }
        let mut expected = envs[0].sequences.clone();
        expected.sort();
        rows.sort();
        assert_eq!(rows, expected);
    }

    #[test]
    fn small_environment_is_sampled_with_replacement() {
        let (vocab, envs) = setup(&[3]);
        let b = batch_scheduler(&envs, &vocab, 8, 0).unwrap().next_batch().unwrap();
        assert_eq!(b.batch_size, 8);
    }

    #[test]
    fn long_sequences_are_cropped() {
        let (vocab, envs) = setup(&[5]);
        let mut s = BatchScheduler::new(&envs, &vocab, 2, 0.15, 0, 4, Sampling::RoundRobin, false).unwrap();
        assert_eq!(s.next_batch().unwrap().seq_len, 4);
    }

    #[test]
    fn pooled_sampling_draws_from_all_environments() {
        let (vocab, envs) = setup(&[8, 8]);
        let mut s = BatchScheduler::new(&envs, &vocab, 16, 0.15, 0, 6, Sampling::Pooled, false).unwrap();
        let b = s.next_batch().unwrap();
        assert_eq!(b.env_id, 0);
        assert_eq!(b.batch_size, 16);
    }

    #[test]
    fn empty_environment_is_rejected() {
        let (vocab, mut envs) = setup(&[4, 4]);
        envs[1].sequences.clear();
        assert!(matches!(
            batch_scheduler(&envs, &vocab, 2, 0),
            Err(TrainError::EmptyEnvironment(1))
        ));
    }
}
