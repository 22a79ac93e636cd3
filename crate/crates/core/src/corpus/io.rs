//! JSON files for vocabularies and environments.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Environment, TokenId, Vocabulary, MASK, PAD, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabularyFile {
    pub tokens: Vec<String>,
    pub pairs: Vec<[TokenId; 2]>,
    pub markup: Vec<TokenId>,
    pub specials: BTreeMap<String, TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFile {
    pub env_id: usize,
    pub descriptor: String,
    pub vocab_hash: String,
    pub sequences: Vec<Vec<TokenId>>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, detail: impl ToString) -> CorpusError {
    CorpusError::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

/// Serializes `value` to a temporary sibling file and renames it into place,
/// so readers never observe a partial file.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let bytes = serde_json::to_vec(value).map_err(|e| format_err(path, e))?;
    write_bytes_atomic(path, &bytes)
}

pub(crate) fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl From<&Vocabulary> for VocabularyFile {
    fn from(v: &Vocabulary) -> Self {
        Self {
            tokens: v.tokens().to_vec(),
            pairs: v.pairs().iter().map(|&(f, m)| [f, m]).collect(),
            markup: v.markup().to_vec(),
            specials: v.specials(),
        }
    }
}

impl VocabularyFile {
    pub fn into_vocabulary(self) -> Result<Vocabulary, CorpusError> {
        let expected = BTreeMap::from([
            ("pad".to_string(), PAD),
            ("mask".to_string(), MASK),
            ("unk".to_string(), UNK),
        ]);
        if self.specials != expected {
            return Err(CorpusError::VocabularyCounts(format!(
                "unexpected special ids {:?}",
                self.specials
            )));
        }
        let n_content = self
            .tokens
            .len()
            .checked_sub(3 + self.markup.len())
            .ok_or_else(|| CorpusError::VocabularyCounts("too few tokens".into()))?;
        Vocabulary::from_parts(
            self.tokens,
            n_content,
            self.pairs.into_iter().map(|[f, m]| (f, m)).collect(),
            self.markup,
        )
    }
}

pub fn write_vocabulary(path: &Path, vocab: &Vocabulary) -> Result<(), CorpusError> {
    write_json_atomic(path, &VocabularyFile::from(vocab))
}

pub fn read_vocabulary(path: &Path) -> Result<Vocabulary, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: VocabularyFile = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
    file.into_vocabulary()
}

pub fn write_environment(path: &Path, env: &Environment, vocab: &Vocabulary) -> Result<(), CorpusError> {
    env.validate(vocab)?;
    let file = EnvironmentFile {
        env_id: env.env_id,
        descriptor: env.descriptor.clone(),
        vocab_hash: vocab.hash(),
        sequences: env.sequences.clone(),
    };
    write_json_atomic(path, &file)
}

/// Reads an environment and checks it against `vocab`.
pub fn read_environment(path: &Path, vocab: &Vocabulary) -> Result<Environment, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: EnvironmentFile = serde_json::from_str(&text).map_err(|e| format_err(path, e))?;
    if file.vocab_hash != vocab.hash() {
        return Err(format_err(
            path,
            format!("vocab hash {} does not match {}", file.vocab_hash, vocab.hash()),
        ));
    }
    let env = Environment::new(file.env_id, file.descriptor, file.sequences);
    env.validate(vocab)?;
    Ok(env)
}
