//! Exemplar retrieval.
//!
//! The support pool is first narrowed to records of the question's category,
//! then partitioned by answer class. Multiple-choice questions get the most
//! similar record of every class, in answer-space order; counting questions
//! get the global top-k regardless of the answer value.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::store::{rank, EmbeddingVector, Store, StoreError, SupportRecord};
use crate::taxonomy::{normalize_answer, AnswerMode, QuestionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ZeroShot,
    Icl,
}

/// Cap on candidate records kept per answer class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolLimit {
    Limited(usize),
    Unlimited,
}

impl PoolLimit {
    pub fn label(self) -> String {
        match self {
            PoolLimit::Limited(n) => n.to_string(),
            PoolLimit::Unlimited => "total".into(),
        }
    }
}

impl std::str::FromStr for PoolLimit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unlimited" | "total" | "all" => Ok(PoolLimit::Unlimited),
            n => n
                .parse()
                .map(PoolLimit::Limited)
                .map_err(|_| format!("pool limit must be an integer or `unlimited`, got {s:?}")),
        }
    }
}

impl Serialize for PoolLimit {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            PoolLimit::Limited(n) => s.serialize_u64(*n as u64),
            PoolLimit::Unlimited => s.serialize_str("unlimited"),
        }
    }
}

impl<'de> Deserialize<'de> for PoolLimit {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(PoolLimit::Limited(n as usize)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub mode: Mode,
    pub pool_limit_per_choice: PoolLimit,
    pub exemplars_per_choice: usize,
    pub counting_top_k: usize,
    pub pool_sample_seed: u64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Icl,
            pool_limit_per_choice: PoolLimit::Unlimited,
            exemplars_per_choice: 1,
            counting_top_k: 2,
            pool_sample_seed: 0,
        }
    }
}

impl RetrievalConfig {
    /// A zero pool cap is the same as running without exemplars.
    pub fn is_zero_shot(&self) -> bool {
        self.mode == Mode::ZeroShot || self.pool_limit_per_choice == PoolLimit::Limited(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExemplarShape {
    Empty,
    MultipleChoice,
    Counting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub record_id: String,
    pub image_ref: String,
    pub answer_text: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    pub shape: ExemplarShape,
    pub entries: Vec<Exemplar>,
    pub degraded_classes: Vec<String>,
}

impl ExemplarSet {
    pub fn empty() -> Self {
        Self {
            shape: ExemplarShape::Empty,
            entries: Vec::new(),
            degraded_classes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("in-context mode needs an embedding for query image `{0}`")]
    MissingQueryEmbedding(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Index of the answer class `answer` belongs to, if any.
fn class_of(space: &[String], answer: &str) -> Option<usize> {
    let n = normalize_answer(answer);
    space.iter().position(|c| normalize_answer(c) == n)
}

fn class_seed(seed: u64, spec: &QuestionSpec, class_key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(spec.category.as_str().as_bytes());
    h.update([0]);
    h.update(class_key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Candidate records for `spec`: same category, own image excluded, each
/// answer class capped by seeded uniform sampling.
///
/// The result is sorted by `record_id`.
pub fn filter_pool<'a>(
    store: &'a Store,
    spec: &QuestionSpec,
    config: &RetrievalConfig,
    exclude_image: Option<&str>,
) -> Vec<&'a SupportRecord> {
    if config.is_zero_shot() {
        return Vec::new();
    }
    let mut classes: BTreeMap<String, Vec<&SupportRecord>> = BTreeMap::new();
    for r in store.records() {
        if r.question_type != spec.category || exclude_image == Some(r.image_id.as_str()) {
            continue;
        }
        let key = match &spec.answer_mode {
            AnswerMode::Closed(space) => match class_of(space, &r.answer_text) {
                Some(i) => normalize_answer(&space[i]),
                None => continue,
            },
            AnswerMode::OpenNumeric => normalize_answer(&r.answer_text),
        };
        classes.entry(key).or_default().push(r);
    }

    let mut pool = Vec::new();
    for (key, mut members) in classes {
        members.sort_by(|a, b| a.record_id.cmp(&b.record_id));
        match config.pool_limit_per_choice {
            PoolLimit::Limited(n) if members.len() > n => {
                let mut rng = ChaCha8Rng::seed_from_u64(class_seed(config.pool_sample_seed, spec, &key));
                let mut picked = index::sample(&mut rng, members.len(), n).into_vec();
                picked.sort_unstable();
                pool.extend(picked.into_iter().map(|i| members[i]));
            }
            _ => pool.extend(members),
        }
    }
    pool.sort_by(|a, b| a.record_id.cmp(&b.record_id));
    pool
}

fn check_dims(pool: &[&SupportRecord], query: &EmbeddingVector) -> Result<(), StoreError> {
    match pool.iter().find(|r| r.embedding.dim() != query.dim()) {
        Some(r) => Err(StoreError::DimMismatch {
            expected: r.embedding.dim(),
            actual: query.dim(),
        }),
        None => Ok(()),
    }
}

fn to_exemplar(record: &SupportRecord, answer_text: String, similarity: f64) -> Exemplar {
    Exemplar {
        record_id: record.record_id.clone(),
        image_ref: record.image_id.clone(),
        answer_text,
        similarity,
    }
}

/// Most similar record of every answer class, in answer-space order.
///
/// Entries carry the registry's spelling of the answer. Classes without any
/// candidate are listed in `degraded_classes`.
pub fn select_multiple_choice(
    pool: &[&SupportRecord],
    query: &EmbeddingVector,
    space: &[String],
    config: &RetrievalConfig,
) -> Result<ExemplarSet, StoreError> {
    if config.is_zero_shot() {
        return Ok(ExemplarSet::empty());
    }
    check_dims(pool, query)?;
    let mut set = ExemplarSet {
        shape: ExemplarShape::MultipleChoice,
        entries: Vec::new(),
        degraded_classes: Vec::new(),
    };
    for (ci, choice) in space.iter().enumerate() {
        let members = pool
            .iter()
            .copied()
            .filter(|r| class_of(space, &r.answer_text) == Some(ci));
        let hits = rank(members, query, config.exemplars_per_choice.max(1));
        if hits.is_empty() {
            set.degraded_classes.push(choice.clone());
        }
        set.entries.extend(
            hits.into_iter()
                .map(|h| to_exemplar(h.record, choice.clone(), h.similarity)),
        );
    }
    Ok(set)
}

/// Global top-k of the pool by similarity, ignoring answer values.
pub fn select_counting(
    pool: &[&SupportRecord],
    query: &EmbeddingVector,
    config: &RetrievalConfig,
) -> Result<ExemplarSet, StoreError> {
    if config.is_zero_shot() {
        return Ok(ExemplarSet::empty());
    }
    check_dims(pool, query)?;
    let entries = rank(pool.iter().copied(), query, config.counting_top_k)
        .into_iter()
        .map(|h| to_exemplar(h.record, h.record.answer_text.trim().to_string(), h.similarity))
        .collect();
    Ok(ExemplarSet {
        shape: ExemplarShape::Counting,
        entries,
        degraded_classes: Vec::new(),
    })
}

/// Filters the pool and applies the selection rule matching `spec`.
pub fn retrieve(
    store: &Store,
    spec: &QuestionSpec,
    query_image: &str,
    query: Option<&EmbeddingVector>,
    config: &RetrievalConfig,
) -> Result<ExemplarSet, RetrievalError> {
    if config.is_zero_shot() {
        return Ok(ExemplarSet::empty());
    }
    let query = query.ok_or_else(|| RetrievalError::MissingQueryEmbedding(query_image.to_string()))?;
    if query.dim() != store.dim() {
        return Err(StoreError::DimMismatch {
            expected: store.dim(),
            actual: query.dim(),
        }
        .into());
    }
    let pool = filter_pool(store, spec, config, Some(query_image));
    let set = match &spec.answer_mode {
        AnswerMode::Closed(space) => select_multiple_choice(&pool, query, space, config)?,
        AnswerMode::OpenNumeric => select_counting(&pool, query, config)?,
    };
    Ok(set)
}
