use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::CorpusError;
use crate::rng;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const UNK: TokenId = 2;
const N_SPECIAL: usize = 3;

/// Token table with special ids, attribute pairs and markup ids.
///
/// Layout: `[PAD, MASK, UNK, content..., markup...]`. Attribute pairs are a
/// seeded selection of content ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    n_content: usize,
    pairs: Vec<(TokenId, TokenId)>,
    markup: Vec<TokenId>,
    pair_of: HashMap<TokenId, (usize, bool)>,
}

pub fn build_vocabulary(
    n_content: usize,
    n_pairs: usize,
    n_markup: usize,
    seed: u64,
) -> Result<Vocabulary, CorpusError> {
    if n_content < 2 * n_pairs {
        return Err(CorpusError::VocabularyCounts(format!(
            "{n_pairs} pairs need at least {} content tokens, got {n_content}",
            2 * n_pairs
        )));
    }
    if !n_markup.is_multiple_of(2) {
        return Err(CorpusError::VocabularyCounts(format!(
            "markup tokens come in open/close pairs, got {n_markup}"
        )));
    }
    let content: Vec<TokenId> = (0..n_content).map(|i| (N_SPECIAL + i) as TokenId).collect();
    let mut shuffled = content.clone();
    shuffled.shuffle(&mut rng::stream(seed, "vocab-pairs", &[]));
    let pairs: Vec<(TokenId, TokenId)> = shuffled
        .chunks(2)
        .take(n_pairs)
        .map(|c| (c[0].min(c[1]), c[0].max(c[1])))
        .collect();

    let mut names: Vec<String> = vec!["[PAD]".into(), "[MASK]".into(), "[UNK]".into()];
    let mut pair_names = HashMap::new();
    for (k, &(f, m)) in pairs.iter().enumerate() {
        pair_names.insert(f, format!("f{k}"));
        pair_names.insert(m, format!("m{k}"));
    }
    for (i, &id) in content.iter().enumerate() {
        names.push(pair_names.remove(&id).unwrap_or_else(|| format!("w{i}")));
    }
    let markup: Vec<TokenId> = (0..n_markup)
        .map(|i| (N_SPECIAL + n_content + i) as TokenId)
        .collect();
    for i in 0..n_markup {
        let tag = i / 2;
        names.push(if i % 2 == 0 {
            format!("<t{tag}>")
        } else {
            format!("</t{tag}>")
        });
    }
    Vocabulary::from_parts(names, n_content, pairs, markup)
}

impl Vocabulary {
    pub(crate) fn from_parts(
        tokens: Vec<String>,
        n_content: usize,
        pairs: Vec<(TokenId, TokenId)>,
        markup: Vec<TokenId>,
    ) -> Result<Self, CorpusError> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(CorpusError::VocabularyCounts(format!("duplicate token {t:?}")));
            }
        }
        let content_end = (N_SPECIAL + n_content) as TokenId;
        let mut pair_of = HashMap::new();
        for (k, &(f, m)) in pairs.iter().enumerate() {
            for (id, is_f) in [(f, true), (m, false)] {
                if !(N_SPECIAL as TokenId..content_end).contains(&id)
                    || pair_of.insert(id, (k, is_f)).is_some()
                {
                    return Err(CorpusError::VocabularyCounts(format!(
                        "pair ({f}, {m}) overlaps specials, markup or another pair"
                    )));
                }
            }
        }
        if markup
            .iter()
            .any(|&id| id < content_end || id as usize >= tokens.len())
        {
            return Err(CorpusError::VocabularyCounts(
                "markup ids must follow the content ids".into(),
            ));
        }
        if tokens.len() != N_SPECIAL + n_content + markup.len() {
            return Err(CorpusError::VocabularyCounts(format!(
                "{} tokens for {n_content} content and {} markup ids",
                tokens.len(),
                markup.len()
            )));
        }
        Ok(Self {
            tokens,
            index,
            n_content,
            pairs,
            markup,
            pair_of,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains_id(&self, id: TokenId) -> bool {
        (id as usize) < self.tokens.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < N_SPECIAL
    }

    pub fn n_content(&self) -> usize {
        self.n_content
    }

    /// All content ids, pair tokens included.
    pub fn content_ids(&self) -> Vec<TokenId> {
        (N_SPECIAL..N_SPECIAL + self.n_content)
            .map(|i| i as TokenId)
            .collect()
    }

    /// Content ids that belong to no attribute pair, in id order.
    pub fn plain_content_ids(&self) -> Vec<TokenId> {
        self.content_ids()
            .into_iter()
            .filter(|id| !self.pair_of.contains_key(id))
            .collect()
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (N_SPECIAL..N_SPECIAL + self.n_content).contains(&(id as usize))
    }

    pub fn pairs(&self) -> &[(TokenId, TokenId)] {
        &self.pairs
    }

    /// For a pair token: its pair index and whether it is the first member.
    pub fn pair_of(&self, id: TokenId) -> Option<(usize, bool)> {
        self.pair_of.get(&id).copied()
    }

    pub fn markup(&self) -> &[TokenId] {
        &self.markup
    }

    pub fn is_markup(&self, id: TokenId) -> bool {
        self.markup.binary_search(&id).is_ok()
    }

    pub fn specials(&self) -> BTreeMap<String, TokenId> {
        BTreeMap::from([
            ("pad".to_string(), PAD),
            ("mask".to_string(), MASK),
            ("unk".to_string(), UNK),
        ])
    }

    /// Short content hash tying data files and checkpoints to this table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        h.update((self.n_content as u64).to_le_bytes());
        for &(f, m) in &self.pairs {
            h.update(f.to_le_bytes());
            h.update(m.to_le_bytes());
        }
        for &k in &self.markup {
            h.update(k.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_vocabulary() {
        let v = build_vocabulary(10, 0, 0, 3).unwrap();
        assert_eq!(v.len(), 13);
        assert!(v.pairs().is_empty());
        assert_eq!(v.content_ids().len(), 10);
        assert!(v.content_ids().iter().all(|&id| id > UNK));
    }

    #[test]
    fn pairs_are_distinct_content_ids() {
        let v = build_vocabulary(20, 3, 4, 11).unwrap();
        assert_eq!(v.pairs().len(), 3);
        let mut ids: Vec<TokenId> = v.pairs().iter().flat_map(|&(f, m)| [f, m]).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        for id in ids {
            assert!(v.is_content(id));
            assert!(!v.is_markup(id));
            assert!(!v.is_special(id));
        }
        assert_eq!(v.plain_content_ids().len(), 14);
        assert_eq!(v.markup().len(), 4);
    }

    #[test]
    fn same_seed_same_table() {
        let a = build_vocabulary(30, 5, 2, 9).unwrap();
        let b = build_vocabulary(30, 5, 2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let c = build_vocabulary(30, 5, 2, 10).unwrap();
        assert_ne!(a.pairs(), c.pairs());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bijection_between_names_and_ids() {
        let v = build_vocabulary(12, 2, 2, 1).unwrap();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
            assert_eq!(v.token(i as TokenId), Some(t.as_str()));
        }
    }

    #[test]
    fn count_violations() {
        assert!(build_vocabulary(5, 3, 0, 0).is_err());
        assert!(build_vocabulary(5, 0, 3, 0).is_err());
    }
}
