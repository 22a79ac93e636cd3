//! Python bindings: vocabularies, models, training, metrics and the
//! experiment harness.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use ilm::corpus::{self, Environment, TokenId, Vocabulary};
use ilm::harness::{self, ExperimentConfig, RunPaths};
use ilm::metrics;
use ilm::model::{self, EncoderConfig, EnsembleMode, InitMode, InvariantModel, LanguageModel};
use ilm::training::{self, TrainConfig, Trainer, Variant};

fn err(e: impl Into<ilm::Error>) -> PyErr {
    let e = e.into();
    match &e {
        ilm::Error::Harness(harness::HarnessError::Io { .. }) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Vocabulary", frozen, module = "pyilm", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (n_content, n_pairs = 0, n_markup = 0, seed = 0))]
    fn new(n_content: usize, n_pairs: usize, n_markup: usize, seed: u64) -> PyResult<Self> {
        let inner = corpus::build_vocabulary(n_content, n_pairs, n_markup, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: corpus::read_vocabulary(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_vocabulary(&path, &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn content_ids(&self) -> Vec<TokenId> {
        self.inner.content_ids()
    }

    fn pairs(&self) -> Vec<(TokenId, TokenId)> {
        self.inner.pairs().to_vec()
    }

    fn markup(&self) -> Vec<TokenId> {
        self.inner.markup().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary(len={}, hash={})", self.inner.len(), self.inner.hash())
    }
}

#[pyclass(name = "Model", module = "pyilm", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: InvariantModel,
}

fn parse_init(s: &str) -> PyResult<InitMode> {
    match s {
        "fresh" => Ok(InitMode::Fresh),
        "shared-head-copy" => Ok(InitMode::SharedHeadCopy),
        _ => Err(PyValueError::new_err(format!("unknown init_mode {s:?}"))),
    }
}

fn parse_ensemble(s: &str) -> PyResult<EnsembleMode> {
    match s {
        "sum" => Ok(EnsembleMode::Sum),
        "mean" => Ok(EnsembleMode::Mean),
        _ => Err(PyValueError::new_err(format!("unknown ensemble {s:?}"))),
    }
}

/// Pads ragged sequences to a row-major id matrix.
fn pad(seqs: &[Vec<TokenId>]) -> (Vec<TokenId>, usize, usize) {
    let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = vec![corpus::PAD; seqs.len() * len];
    for (i, s) in seqs.iter().enumerate() {
        ids[i * len..i * len + s.len()].copy_from_slice(s);
    }
    (ids, seqs.len(), len)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        vocab_size, n_heads = 1, embed_dim = 64, n_layers = 2, n_attn_heads = 4, ffn_dim = 128,
        max_seq_len = 64, seed = 0, init_mode = "shared-head-copy", ensemble = "sum"
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        n_heads: usize,
        embed_dim: usize,
        n_layers: usize,
        n_attn_heads: usize,
        ffn_dim: usize,
        max_seq_len: usize,
        seed: u64,
        init_mode: &str,
        ensemble: &str,
    ) -> PyResult<Self> {
        let cfg = EncoderConfig {
            vocab_size,
            embed_dim,
            n_layers,
            n_attn_heads,
            ffn_dim,
            max_seq_len,
            seed,
        };
        let mut inner = model::init_model(&cfg, n_heads, parse_init(init_mode)?).map_err(err)?;
        inner.set_ensemble(parse_ensemble(ensemble)?);
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<(Self, u64)> {
        let (inner, ckpt) = model::read_checkpoint(&path).map_err(err)?;
        Ok((Self { inner }, ckpt.step))
    }

    #[pyo3(signature = (path, step = 0, vocab_hash = ""))]
    fn save(&self, path: PathBuf, step: u64, vocab_hash: &str) -> PyResult<()> {
        model::write_checkpoint(&path, &self.inner, step, vocab_hash).map_err(err)
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config().vocab_size
    }

    /// Ensemble logits, `batch × len × vocab`, for ragged id lists padded
    /// to the longest.
    fn logits(&self, sequences: Vec<Vec<TokenId>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let (ids, batch, len) = pad(&sequences);
        let flat = self.inner.logits(&ids, batch, len).map_err(err)?;
        let v = self.inner.config().vocab_size;
        Ok((0..batch)
            .map(|b| (0..len).map(|t| flat[(b * len + t) * v..(b * len + t + 1) * v].to_vec()).collect())
            .collect())
    }

    fn head_distances(&self) -> PyResult<Vec<Vec<f64>>> {
        metrics::head_distances(&self.inner).map_err(err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(vocab_size={}, n_heads={}, embed_dim={}, n_layers={}, n_params={})",
            c.vocab_size,
            self.inner.n_heads(),
            c.embed_dim,
            c.n_layers,
            self.inner.n_params()
        )
    }
}

#[pyfunction]
fn gen_clean_corpus(vocab: &PyVocabulary, n_sentences: usize, seq_len: usize, seed: u64) -> PyResult<Vec<Vec<TokenId>>> {
    corpus::gen_clean_corpus(&vocab.inner, n_sentences, seq_len, seed).map_err(err)
}

#[pyfunction]
fn wrap_with_markup(
    sequences: Vec<Vec<TokenId>>,
    vocab: &PyVocabulary,
    markup_rate: f64,
    seed: u64,
) -> PyResult<Vec<Vec<TokenId>>> {
    corpus::wrap_with_markup(&sequences, &vocab.inner, markup_rate, seed).map_err(err)
}

#[pyfunction]
fn strip_markup(sequence: Vec<TokenId>, vocab: &PyVocabulary) -> Vec<TokenId> {
    corpus::strip_markup(&sequence, &vocab.inner)
}

#[pyfunction]
fn swap_pairs(sequence: Vec<TokenId>, vocab: &PyVocabulary) -> Vec<TokenId> {
    corpus::swap_pairs(&sequence, &vocab.inner)
}

/// Trains a copy of `model` on one sequence list per environment and
/// returns it with the per-step losses.
#[pyfunction]
#[pyo3(signature = (model, envs, vocab, n_steps, batch_size = 16, learning_rate = 1e-3, seed = 0, variant = "ilm"))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    model: &PyModel,
    envs: Vec<Vec<Vec<TokenId>>>,
    vocab: &PyVocabulary,
    n_steps: u64,
    batch_size: usize,
    learning_rate: f32,
    seed: u64,
    variant: &str,
) -> PyResult<(PyModel, Vec<f32>)> {
    let variant = match variant {
        "ilm" => Variant::Invariant,
        "elm" => Variant::Erm,
        other => return Err(PyValueError::new_err(format!("unknown variant {other:?}; expected ilm or elm"))),
    };
    let envs: Vec<Environment> = envs
        .into_iter()
        .enumerate()
        .map(|(e, seqs)| Environment::new(e, format!("env{e}"), seqs))
        .collect();
    let cfg = TrainConfig {
        n_steps,
        batch_size,
        learning_rate,
        seed,
        ..Default::default()
    };
    let start = model.inner.clone();
    let (trained, log) = py
        .detach(|| -> Result<_, training::TrainError> {
            let mut t = Trainer::new(start, &envs, &vocab.inner, &cfg, variant)?;
            t.run()?;
            Ok(t.into_parts())
        })
        .map_err(err)?;
    Ok((PyModel { inner: trained }, log.records.iter().map(|r| r.loss).collect()))
}

#[pyfunction]
#[pyo3(signature = (model, sequences, vocab, mask_rate = 0.15, seed = 0))]
fn perplexity(model: &PyModel, sequences: Vec<Vec<TokenId>>, vocab: &PyVocabulary, mask_rate: f64, seed: u64) -> PyResult<f64> {
    metrics::perplexity(&model.inner, &sequences, &vocab.inner, mask_rate, seed).map_err(err)
}

#[pyfunction]
fn entropy_bias(model: &PyModel, sequences: Vec<Vec<TokenId>>, vocab: &PyVocabulary) -> PyResult<f64> {
    Ok(metrics::entropy_bias(&model.inner, &sequences, &vocab.inner).map_err(err)?.mean)
}

#[pyfunction]
fn d_in_d_out(dist: Vec<Vec<f64>>, grouping: Vec<String>) -> PyResult<(f64, f64)> {
    metrics::d_in_d_out(&dist, &grouping).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (dist, dim = 2))]
fn classical_mds(dist: Vec<Vec<f64>>, dim: usize) -> PyResult<Vec<Vec<f64>>> {
    metrics::classical_mds(&dist, dim).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (samples, n_resamples = 10_000, level = 0.95, seed = 0))]
fn bootstrap_ci(samples: Vec<f64>, n_resamples: usize, level: f64, seed: u64) -> PyResult<(f64, f64)> {
    metrics::bootstrap_ci(&samples, n_resamples, level, seed).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pairs, lower_is_better = true))]
fn paired_win_probability(pairs: Vec<(f64, f64)>, lower_is_better: bool) -> PyResult<f64> {
    metrics::paired_win_probability(&pairs, lower_is_better).map_err(err)
}

fn load_config(path: &Path) -> PyResult<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(err)
}

#[pyfunction]
fn gen_data(config: PathBuf, out: PathBuf) -> PyResult<Vec<PathBuf>> {
    harness::gen_data(&load_config(&config)?, &out).map_err(err)
}

/// Runs a whole experiment and returns the report directory.
#[pyfunction]
#[pyo3(signature = (config, root = None, jobs = 1))]
fn run_all(py: Python<'_>, config: PathBuf, root: Option<PathBuf>, jobs: usize) -> PyResult<PathBuf> {
    let cfg = load_config(&config)?;
    let paths = RunPaths::for_config(&cfg, root.as_deref());
    py.detach(|| -> Result<(), harness::HarnessError> {
        let outcome = harness::run_all(&cfg, &paths, jobs)?;
        harness::aggregate(&cfg, &paths)?;
        if outcome.failed > 0 {
            return Err(harness::HarnessError::RunsFailed {
                failed: outcome.failed,
                total: outcome.manifest.entries.len(),
            });
        }
        Ok(())
    })
    .map_err(err)?;
    Ok(paths.report())
}

/// Pairs the rows of a metrics CSV and returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (metrics_csv, seed = 0, n_resamples = 10_000, level = 0.95))]
fn compare(metrics_csv: PathBuf, seed: u64, n_resamples: usize, level: f64) -> PyResult<String> {
    let report = harness::compare(&metrics_csv, seed, n_resamples, level).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn pyilm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_clean_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(wrap_with_markup, m)?)?;
    m.add_function(wrap_pyfunction!(strip_markup, m)?)?;
    m.add_function(wrap_pyfunction!(swap_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_bias, m)?)?;
    m.add_function(wrap_pyfunction!(d_in_d_out, m)?)?;
    m.add_function(wrap_pyfunction!(classical_mds, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap_ci, m)?)?;
    m.add_function(wrap_pyfunction!(paired_win_probability, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
