//! Entity-pair index over a training split.
//!
//! Retrieval is exact match on normalized `(head, tail)` surfaces. The index also
//! groups pairs and examples by relation, which backs supervision-pair sampling
//! for recall training and distractor sampling for noisy reason training.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{fingerprint, Corpus, Example};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("split `{0}` does not exist in the corpus")]
    UnknownSplit(String),
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("index fingerprint {index} does not match corpus split fingerprint {corpus}")]
    FingerprintMismatch { index: String, corpus: String },
    #[error("unsupported index version {0} (expected {INDEX_FORMAT_VERSION})")]
    Version(u32),
    #[error("index file disagrees with the corpus it was built from: {0}")]
    Inconsistent(String),
    #[error("no training example has a relation other than `{0}`")]
    NoEligible(String),
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("index file is not valid JSON")]
    Json(#[from] serde_json::Error),
}

/// Surface-form normalization applied to both index keys and queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct NormConfig {
    #[serde(default)]
    pub case_fold: bool,
}

/// NFC, trim, collapse internal whitespace runs to one space, optional case fold.
pub fn normalize_surface(s: &str, cfg: &NormConfig) -> String {
    let mut out = String::with_capacity(s.len());
    let mut pending_space = false;
    for ch in s.nfc() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
            continue;
        }
        if pending_space {
            out.push(' ');
            pending_space = false;
        }
        out.push(ch);
    }
    if cfg.case_fold {
        out.to_lowercase()
    } else {
        out
    }
}

/// Normalized `(head, tail)` surfaces.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub head: String,
    pub tail: String,
}

impl PairKey {
    pub fn new(head: &str, tail: &str, cfg: &NormConfig) -> Self {
        Self {
            head: normalize_surface(head, cfg),
            tail: normalize_surface(tail, cfg),
        }
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}", self.head, self.tail)
    }
}

/// A raw entity-pair query, as generated by a model or read from data.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityPair {
    pub head: String,
    pub tail: String,
}

impl EntityPair {
    pub fn new(head: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            tail: tail.into(),
        }
    }

    pub fn key(&self, cfg: &NormConfig) -> PairKey {
        PairKey::new(&self.head, &self.tail, cfg)
    }
}

impl From<&PairKey> for EntityPair {
    fn from(k: &PairKey) -> Self {
        EntityPair::new(k.head.clone(), k.tail.clone())
    }
}

/// How a generated pair relates to the indexed corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    PairGrounded,
    EntitiesGroundedPairNot,
    OneEntityGrounded,
    Ungrounded,
}

/// Supervision pairs sampled for one training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionSample {
    pub pairs: Vec<PairKey>,
    /// Fewer than `k` candidates were available.
    pub shortfall: bool,
}

#[derive(Debug, Clone)]
pub struct DistractorSample<'a> {
    pub examples: Vec<&'a Example>,
    /// The eligible pool was smaller than requested; draws repeat.
    pub with_replacement: bool,
}

/// Immutable exact-match index over one corpus split.
#[derive(Debug, Clone)]
pub struct PairIndex {
    split: String,
    norm: NormConfig,
    source_fingerprint: String,
    examples: Vec<Example>,
    keys: Vec<PairKey>,
    id_pos: HashMap<String, usize>,
    pair_to_examples: HashMap<PairKey, Vec<usize>>,
    /// Sorted, duplicate-free.
    relation_to_pairs: BTreeMap<String, Vec<PairKey>>,
    relation_to_examples: BTreeMap<String, Vec<usize>>,
    entities: HashSet<String>,
}

/// Builds the index over `split`. Example lists follow corpus order.
pub fn build_index(corpus: &Corpus, split: &str, norm: NormConfig) -> Result<PairIndex, IndexError> {
    let examples = corpus
        .split(split)
        .ok_or_else(|| IndexError::UnknownSplit(split.to_string()))?;
    if examples.is_empty() {
        return Err(IndexError::EmptySplit(split.to_string()));
    }
    Ok(PairIndex::from_examples(split, examples.to_vec(), norm))
}

impl PairIndex {
    fn from_examples(split: &str, examples: Vec<Example>, norm: NormConfig) -> Self {
        let source_fingerprint = fingerprint(&examples);
        let mut keys = Vec::with_capacity(examples.len());
        let mut id_pos = HashMap::with_capacity(examples.len());
        let mut pair_to_examples: HashMap<PairKey, Vec<usize>> = HashMap::new();
        let mut relation_to_pairs: BTreeMap<String, Vec<PairKey>> = BTreeMap::new();
        let mut relation_to_examples: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut entities = HashSet::new();

        for (pos, e) in examples.iter().enumerate() {
            let key = e.pair_key(&norm);
            id_pos.insert(e.id.clone(), pos);
            pair_to_examples.entry(key.clone()).or_default().push(pos);
            relation_to_pairs
                .entry(e.relation.clone())
                .or_default()
                .push(key.clone());
            relation_to_examples
                .entry(e.relation.clone())
                .or_default()
                .push(pos);
            entities.insert(key.head.clone());
            entities.insert(key.tail.clone());
            keys.push(key);
        }
        for pairs in relation_to_pairs.values_mut() {
            pairs.sort();
            pairs.dedup();
        }

        Self {
            split: split.to_string(),
            norm,
            source_fingerprint,
            examples,
            keys,
            id_pos,
            pair_to_examples,
            relation_to_pairs,
            relation_to_examples,
            entities,
        }
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn norm(&self) -> &NormConfig {
        &self.norm
    }

    pub fn source_fingerprint(&self) -> &str {
        &self.source_fingerprint
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Indexed examples in corpus order.
    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn example(&self, id: &str) -> Option<&Example> {
        self.id_pos.get(id).map(|&p| &self.examples[p])
    }

    /// Normalized key of an indexed example.
    pub fn key_of(&self, id: &str) -> Option<&PairKey> {
        self.id_pos.get(id).map(|&p| &self.keys[p])
    }

    pub fn pair_count(&self) -> usize {
        self.pair_to_examples.len()
    }

    /// Example ids for a key, in corpus order.
    pub fn example_ids(&self, key: &PairKey) -> Vec<&str> {
        self.pair_to_examples
            .get(key)
            .map(|v| v.iter().map(|&p| self.examples[p].id.as_str()).collect())
            .unwrap_or_default()
    }

    /// Every `(key, example ids)` entry, sorted by key.
    pub fn pair_entries(&self) -> Vec<(&PairKey, Vec<&str>)> {
        let mut entries: Vec<_> = self
            .pair_to_examples
            .iter()
            .map(|(k, v)| (k, v.iter().map(|&p| self.examples[p].id.as_str()).collect()))
            .collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
    }

    /// Distinct pairs of a relation, sorted.
    pub fn relation_pairs(&self, relation: &str) -> &[PairKey] {
        self.relation_to_pairs
            .get(relation)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Example ids of a relation, in corpus order.
    pub fn relation_example_ids(&self, relation: &str) -> Vec<&str> {
        self.relation_to_examples
            .get(relation)
            .map(|v| v.iter().map(|&p| self.examples[p].id.as_str()).collect())
            .unwrap_or_default()
    }

    pub fn relations(&self) -> impl Iterator<Item = &str> {
        self.relation_to_pairs.keys().map(String::as_str)
    }

    /// All training examples whose normalized pair equals the query, in corpus order.
    pub fn retrieve(&self, query: &EntityPair) -> Vec<&Example> {
        self.retrieve_key(&query.key(&self.norm))
    }

    pub fn retrieve_key(&self, key: &PairKey) -> Vec<&Example> {
        self.pair_to_examples
            .get(key)
            .map(|v| v.iter().map(|&p| &self.examples[p]).collect())
            .unwrap_or_default()
    }

    /// The first matching example in corpus order, used as the single
    /// demonstration for a query.
    pub fn first_match(&self, query: &EntityPair) -> Option<&Example> {
        self.pair_to_examples
            .get(&query.key(&self.norm))
            .and_then(|v| v.first())
            .map(|&p| &self.examples[p])
    }

    pub fn contains_entity(&self, surface: &str) -> bool {
        self.entities.contains(&normalize_surface(surface, &self.norm))
    }

    pub fn classify(&self, pair: &EntityPair) -> Grounding {
        let key = pair.key(&self.norm);
        if self.pair_to_examples.contains_key(&key) {
            return Grounding::PairGrounded;
        }
        match (self.entities.contains(&key.head), self.entities.contains(&key.tail)) {
            (true, true) => Grounding::EntitiesGroundedPairNot,
            (true, false) | (false, true) => Grounding::OneEntityGrounded,
            (false, false) => Grounding::Ungrounded,
        }
    }

    /// Uniform sample without replacement of up to `k` pairs sharing the example's
    /// relation, never including the example's own pair.
    pub fn sample_supervision_pairs<R: Rng + ?Sized>(
        &self,
        example: &Example,
        k: usize,
        rng: &mut R,
    ) -> SupervisionSample {
        let own = example.pair_key(&self.norm);
        let pairs = self.relation_pairs(&example.relation);
        let own_pos = pairs.binary_search(&own).ok();
        let available = pairs.len() - usize::from(own_pos.is_some());
        let take = k.min(available);
        let picked = if take == 0 {
            Vec::new()
        } else {
            index::sample(rng, available, take)
                .into_iter()
                .map(|i| match own_pos {
                    Some(skip) if i >= skip => pairs[i + 1].clone(),
                    _ => pairs[i].clone(),
                })
                .collect()
        };
        SupervisionSample {
            pairs: picked,
            shortfall: take < k,
        }
    }

    /// Draws `m` training examples uniformly from those whose relation differs from
    /// `exclude_relation`. Draws are distinct unless the pool is smaller than `m`.
    pub fn sample_distractors<R: Rng + ?Sized>(
        &self,
        exclude_relation: &str,
        m: usize,
        rng: &mut R,
    ) -> Result<DistractorSample<'_>, IndexError> {
        let excluded = self
            .relation_to_examples
            .get(exclude_relation)
            .map_or(0, Vec::len);
        let pool = self.examples.len() - excluded;
        if pool == 0 {
            return Err(IndexError::NoEligible(exclude_relation.to_string()));
        }
        let with_replacement = m > pool;
        let eligible = |p: usize| self.examples[p].relation != exclude_relation;

        let positions: Vec<usize> = if with_replacement || pool >= 4 * m.max(1) {
            // Rejection sampling over the whole split is uniform over the pool.
            let mut chosen = Vec::with_capacity(m);
            let mut seen = HashSet::new();
            while chosen.len() < m {
                let p = rng.random_range(0..self.examples.len());
                if eligible(p) && (with_replacement || seen.insert(p)) {
                    chosen.push(p);
                }
            }
            chosen
        } else {
            let candidates: Vec<usize> = (0..self.examples.len()).filter(|&p| eligible(p)).collect();
            index::sample(rng, candidates.len(), m)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        };

        Ok(DistractorSample {
            examples: positions.into_iter().map(|p| &self.examples[p]).collect(),
            with_replacement,
        })
    }

    /// Uniform draw of a different example with the same relation as `id`.
    /// `None` when the relation has no other example.
    pub fn sample_same_relation_alternative<R: Rng + ?Sized>(
        &self,
        id: &str,
        rng: &mut R,
    ) -> Option<&Example> {
        let &pos = self.id_pos.get(id)?;
        let members = self.relation_to_examples.get(&self.examples[pos].relation)?;
        if members.len() < 2 {
            return None;
        }
        let own = members.iter().position(|&p| p == pos)?;
        let mut i = rng.random_range(0..members.len() - 1);
        if i >= own {
            i += 1;
        }
        Some(&self.examples[members[i]])
    }

    // -----------------------------------------------------------------------
    // Persistence

    pub fn to_file(&self) -> IndexFile {
        IndexFile {
            version: INDEX_FORMAT_VERSION,
            split: self.split.clone(),
            norm_config: self.norm,
            source_fingerprint: self.source_fingerprint.clone(),
            pair_to_examples: self
                .pair_entries()
                .into_iter()
                .map(|(k, ids)| PairEntry {
                    head: k.head.clone(),
                    tail: k.tail.clone(),
                    examples: ids.into_iter().map(str::to_string).collect(),
                })
                .collect(),
            relation_to_pairs: self
                .relation_to_pairs
                .iter()
                .map(|(r, pairs)| {
                    (
                        r.clone(),
                        pairs.iter().map(|k| [k.head.clone(), k.tail.clone()]).collect(),
                    )
                })
                .collect(),
        }
    }

    /// Deterministic JSON serialization.
    pub fn to_json(&self) -> String {
        // Only strings and integers; serialization cannot fail.
        serde_json::to_string(&self.to_file()).expect("index serializes")
    }

    /// Restores an index from its persisted form. The corpus split must have the
    /// recorded fingerprint and must reproduce the persisted maps.
    pub fn from_json(json: &str, corpus: &Corpus) -> Result<Self, IndexError> {
        let file: IndexFile = serde_json::from_str(json)?;
        Self::from_file(file, corpus)
    }

    pub fn from_file(file: IndexFile, corpus: &Corpus) -> Result<Self, IndexError> {
        if file.version != INDEX_FORMAT_VERSION {
            return Err(IndexError::Version(file.version));
        }
        let examples = corpus
            .split(&file.split)
            .ok_or_else(|| IndexError::UnknownSplit(file.split.clone()))?;
        let corpus_fp = fingerprint(examples);
        if corpus_fp != file.source_fingerprint {
            return Err(IndexError::FingerprintMismatch {
                index: file.source_fingerprint,
                corpus: corpus_fp,
            });
        }
        let index = build_index(corpus, &file.split, file.norm_config)?;
        let rebuilt = index.to_file();
        if rebuilt.pair_to_examples != file.pair_to_examples {
            return Err(IndexError::Inconsistent("pair_to_examples".into()));
        }
        if rebuilt.relation_to_pairs != file.relation_to_pairs {
            return Err(IndexError::Inconsistent("relation_to_pairs".into()));
        }
        Ok(index)
    }
}

/// Persisted index layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFile {
    pub version: u32,
    pub split: String,
    pub norm_config: NormConfig,
    pub source_fingerprint: String,
    pub pair_to_examples: Vec<PairEntry>,
    pub relation_to_pairs: BTreeMap<String, Vec<[String; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub head: String,
    pub tail: String,
    pub examples: Vec<String>,
}
