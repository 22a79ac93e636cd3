use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::config::{CorpusSpec, EnvSizing, ExperimentConfig};
use super::HarnessError;
use crate::corpus::{
    build_vocabulary, gen_clean_corpus, gen_correlation_sentences, gen_domain_envs_with, read_environment,
    read_vocabulary, split_correlation, swap_pairs, wrap_with_markup, write_environment, write_vocabulary,
    CorrelationSplitConfig, Environment, TokenId, Vocabulary,
};
use crate::rng;

fn data_seed(cfg: &ExperimentConfig) -> u64 {
    rng::derive_seed(cfg.master_seed, "data", &[])
}

fn p_dir(p: f64) -> String {
    format!("p{p}")
}

/// Writes the vocabulary and every environment and test file of an
/// experiment into `dir`.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let seed = data_seed(cfg);
    let mut written = Vec::new();
    let mut put = |name: String, env: &Environment, vocab: &Vocabulary| -> Result<(), HarnessError> {
        let path = dir.join(name);
        write_environment(&path, env, vocab)?;
        written.push(path);
        Ok(())
    };
    let vocab = match &cfg.corpus {
        CorpusSpec::StructuredNoise(c) => {
            let vocab = build_vocabulary(c.n_content, 0, c.n_markup, seed)?;
            let n_markup_seqs = match c.sizing {
                EnvSizing::EqualSequences => c.n_train,
                // wrapping stretches a sentence by 1 / (1 - r) on average
                EnvSizing::EqualTokens => ((c.n_train as f64 * (1.0 - c.markup_rate)).round() as usize).max(1),
            };
            let all = gen_clean_corpus(&vocab, c.n_train + n_markup_seqs + c.n_test, c.seq_len, seed)?;
            let (clean, rest) = all.split_at(c.n_train);
            let (to_wrap, test) = rest.split_at(n_markup_seqs);
            let markup = wrap_with_markup(to_wrap, &vocab, c.markup_rate, seed)?;
            put("env_0.json".into(), &Environment::new(0, "clean", clean.to_vec()), &vocab)?;
            put("env_1.json".into(), &Environment::new(1, "markup", markup), &vocab)?;
            put("test.json".into(), &Environment::new(0, "clean-test", test.to_vec()), &vocab)?;
            vocab
        }
        CorpusSpec::Correlation(c) => {
            let vocab = build_vocabulary(c.n_content, c.n_pairs, 0, seed)?;
            let split = |n_sentences| CorrelationSplitConfig {
                p: 1.0,
                pair_bias: c.pair_bias,
                n_contexts: c.n_contexts,
                n_sentences,
                seq_len: c.seq_len,
            };
            let sentences = gen_correlation_sentences(&vocab, &split(c.n_sentences), seed)?;
            for &p in &c.p_values {
                let (a, b) = split_correlation(sentences.clone(), &vocab, p, seed);
                put(format!("{}/env_0.json", p_dir(p)), &a, &vocab)?;
                put(format!("{}/env_1.json", p_dir(p)), &b, &vocab)?;
            }
            // Balanced test set: every other sentence has its pairs swapped.
            let test: Vec<Vec<TokenId>> =
                gen_correlation_sentences(&vocab, &split(c.n_test), rng::derive_seed(seed, "test", &[]))?
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| if i % 2 == 1 { swap_pairs(&s, &vocab) } else { s })
                    .collect();
            put("test.json".into(), &Environment::new(0, "mixed-test", test), &vocab)?;
            vocab
        }
        CorpusSpec::Ood(c) => {
            let vocab = build_vocabulary(c.n_content, 0, 0, seed)?;
            let envs = gen_domain_envs_with(
                &vocab,
                c.n_pool,
                c.n_train + c.n_test,
                c.seq_len,
                c.overlap,
                c.shared_mix,
                seed,
            )?;
            for env in envs {
                let d = env.env_id;
                let (train, test) = env.sequences.split_at(c.n_train);
                put(format!("domain_{d}.json"), &Environment::new(d, env.descriptor.clone(), train.to_vec()), &vocab)?;
                put(
                    format!("domain_{d}_test.json"),
                    &Environment::new(d, format!("{}-test", env.descriptor), test.to_vec()),
                    &vocab,
                )?;
            }
            vocab
        }
        CorpusSpec::HeadsDynamics(c) => {
            let vocab = build_vocabulary(c.n_content, 0, 0, seed)?;
            let domains = gen_domain_envs_with(&vocab, 2, 2 * c.n_per_env + c.n_per_env / 2, c.seq_len, c.overlap, c.shared_mix, seed)?;
            let mut test = Vec::new();
            for (d, env) in domains.iter().enumerate() {
                let label = domain_label(d);
                for half in 0..2 {
                    let e = 2 * d + half;
                    let seqs = env.sequences[half * c.n_per_env..(half + 1) * c.n_per_env].to_vec();
                    put(format!("env_{e}.json"), &Environment::new(e, format!("{label}{}", half + 1), seqs), &vocab)?;
                }
                test.extend_from_slice(&env.sequences[2 * c.n_per_env..]);
            }
            put("test.json".into(), &Environment::new(0, "both-domains-test", test), &vocab)?;
            vocab
        }
    };
    let vpath = dir.join("vocab.json");
    write_vocabulary(&vpath, &vocab)?;
    written.insert(0, vpath);
    Ok(written)
}

fn domain_label(d: usize) -> char {
    (b'A' + d as u8) as char
}

/// Training and evaluation data of one (sub-experiment, restart) pair.
#[derive(Debug, Clone)]
pub struct RunData {
    pub envs: Vec<Environment>,
    pub test: Vec<Vec<TokenId>>,
    /// Group label per environment, used by head-distance metrics.
    pub grouping: Vec<String>,
}

/// Everything `gen_data` wrote, loaded back.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub vocab: Vocabulary,
    dir: PathBuf,
}

pub fn load_data(dir: &Path) -> Result<ExperimentData, HarnessError> {
    let vocab = read_vocabulary(&dir.join("vocab.json"))?;
    Ok(ExperimentData {
        vocab,
        dir: dir.to_path_buf(),
    })
}

impl ExperimentData {
    fn env(&self, name: &str) -> Result<Environment, HarnessError> {
        Ok(read_environment(&self.dir.join(name), &self.vocab)?)
    }

    /// Domains a restart trains on and the one it holds out, drawn from
    /// the pool by a per-restart permutation.
    pub fn ood_domains(cfg: &ExperimentConfig, n_train: usize, restart: usize) -> (Vec<usize>, usize) {
        let CorpusSpec::Ood(c) = &cfg.corpus else {
            return (Vec::new(), 0);
        };
        let mut perm: Vec<usize> = (0..c.n_pool).collect();
        perm.shuffle(&mut rng::stream(cfg.master_seed, "ood-domains", &[restart as u64]));
        (perm[1..=n_train].to_vec(), perm[0])
    }

    pub fn run_data(&self, cfg: &ExperimentConfig, sub_index: usize, restart: usize) -> Result<RunData, HarnessError> {
        let subs = cfg.sub_experiments();
        let sub = subs
            .get(sub_index)
            .ok_or_else(|| HarnessError::Invalid(format!("no sub-experiment {sub_index}")))?;
        let renumber = |envs: Vec<Environment>| -> Vec<Environment> {
            envs.into_iter()
                .enumerate()
                .map(|(i, mut e)| {
                    e.env_id = i;
                    e
                })
                .collect()
        };
        let data = match &cfg.corpus {
            CorpusSpec::StructuredNoise(_) => RunData {
                envs: vec![self.env("env_0.json")?, self.env("env_1.json")?],
                test: self.env("test.json")?.sequences,
                grouping: vec!["clean".into(), "markup".into()],
            },
            CorpusSpec::Correlation(_) => {
                let p = sub.p.expect("correlation sub-experiments carry p");
                RunData {
                    envs: vec![
                        self.env(&format!("{}/env_0.json", p_dir(p)))?,
                        self.env(&format!("{}/env_1.json", p_dir(p)))?,
                    ],
                    test: self.env("test.json")?.sequences,
                    grouping: vec!["original".into(), "swapped".into()],
                }
            }
            CorpusSpec::Ood(_) => {
                let n = sub.n_domains.expect("ood sub-experiments carry n");
                let (train, held_out) = Self::ood_domains(cfg, n, restart);
                let envs = train
                    .iter()
                    .map(|d| self.env(&format!("domain_{d}.json")))
                    .collect::<Result<Vec<_>, _>>()?;
                RunData {
                    envs: renumber(envs),
                    test: self.env(&format!("domain_{held_out}_test.json"))?.sequences,
                    grouping: train.iter().map(|d| format!("domain-{d}")).collect(),
                }
            }
            CorpusSpec::HeadsDynamics(_) => RunData {
                envs: (0..4).map(|e| self.env(&format!("env_{e}.json"))).collect::<Result<_, _>>()?,
                test: self.env("test.json")?.sequences,
                grouping: (0..4).map(|e| domain_label(e / 2).to_string()).collect(),
            },
        };
        Ok(data)
    }
}
