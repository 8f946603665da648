//! Exact cosine-similarity store over precomputed support-set embeddings.
//!
//! Every vector is L2-normalized when it enters the store. Queries are
//! exhaustive scans; results are ordered by
//! similarity descending and then by `record_id` ascending, which makes the
//! ranking a total order and repeated queries byte-identical.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::taxonomy::Category;

/// Embedding width produced by the CLIP ViT-B/32 projection head.
pub const DEFAULT_DIM: usize = 512;

/// Components whose absolute value is below this are treated as zero.
const ZERO_EPS: f64 = 1e-12;

const UNIT_TOL: f64 = 4.0 * f32::EPSILON as f64;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{0}` has an empty answer text")]
    EmptyAnswer(String),
    #[error("vector contains a non-finite component")]
    NonFinite,
    #[error("sidecar: {0}")]
    Sidecar(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A unit-length embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(&self.0)
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Scales `raw` to unit L2 norm, preserving direction.
pub fn normalize(raw: &[f32]) -> Result<EmbeddingVector, StoreError> {
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(StoreError::NonFinite);
    }
    let norm = l2_norm(raw);
    if norm < ZERO_EPS {
        return Err(StoreError::ZeroVector);
    }
    // already unit length to f32 precision: keep the bits, so loading a
    // saved store reproduces it exactly
    if (norm - 1.0).abs() <= UNIT_TOL {
        return Ok(EmbeddingVector(raw.to_vec()));
    }
    Ok(EmbeddingVector(
        raw.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
    ))
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Stored vectors are already unit length, but the norms are divided out
/// anyway so the result is exact for any pair of embeddings.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, StoreError> {
    if a.dim() != b.dim() {
        return Err(StoreError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let denom = a.l2_norm() * b.l2_norm();
    Ok((dot(&a.0, &b.0) / denom).clamp(-1.0, 1.0))
}

/// One support-set triplet plus its image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportRecord {
    pub record_id: String,
    pub image_id: String,
    pub question_id: String,
    pub question_type: Category,
    pub question_text: String,
    pub answer_text: String,
    pub embedding: EmbeddingVector,
}

/// Header fields describing where a store came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

/// Immutable, queryable set of support records.
#[derive(Debug, Clone)]
pub struct Store {
    manifest: StoreManifest,
    records: Vec<SupportRecord>,
}

/// A ranked query hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit<'a> {
    pub record: &'a SupportRecord,
    pub similarity: f64,
}

/// Total order used by every ranking in the engine.
pub(crate) fn rank_order(a_sim: f64, a_id: &str, b_sim: f64, b_id: &str) -> Ordering {
    // `+ 0.0` folds -0.0 into +0.0 so both zeros tie
    (b_sim + 0.0).total_cmp(&(a_sim + 0.0)).then_with(|| a_id.cmp(b_id))
}

impl Store {
    /// Builds a store from records whose embeddings are already normalized.
    ///
    /// Embeddings are renormalized here regardless, so callers may pass raw
    /// vectors wrapped through [`normalize`] or not at all via
    /// [`Store::ingest_raw`].
    pub fn ingest(records: Vec<SupportRecord>, manifest: StoreManifest) -> Result<Self, StoreError> {
        let mut seen = HashSet::with_capacity(records.len());
        let mut out = Vec::with_capacity(records.len());
        for mut rec in records {
            if rec.embedding.dim() != manifest.dim {
                return Err(StoreError::DimMismatch {
                    expected: manifest.dim,
                    actual: rec.embedding.dim(),
                });
            }
            if !seen.insert(rec.record_id.clone()) {
                return Err(StoreError::DuplicateId(rec.record_id));
            }
            if rec.answer_text.trim().is_empty() {
                return Err(StoreError::EmptyAnswer(rec.record_id));
            }
            rec.embedding = normalize(rec.embedding.as_slice())?;
            out.push(rec);
        }
        Ok(Self {
            manifest,
            records: out,
        })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            manifest: StoreManifest {
                dim,
                ..Default::default()
            },
            records: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn manifest(&self) -> &StoreManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SupportRecord] {
        &self.records
    }

    /// Embedding of any record showing `image_id`.
    pub fn image_embedding(&self, image_id: &str) -> Option<&EmbeddingVector> {
        self.records
            .iter()
            .find(|r| r.image_id == image_id)
            .map(|r| &r.embedding)
    }

    /// Number of distinct images across all records.
    pub fn unique_images(&self) -> usize {
        self.records
            .iter()
            .map(|r| r.image_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    /// Exact top-k over the records accepted by `predicate`.
    pub fn top_k<F>(
        &self,
        query: &EmbeddingVector,
        predicate: F,
        k: usize,
    ) -> Result<Vec<Hit<'_>>, StoreError>
    where
        F: Fn(&SupportRecord) -> bool,
    {
        if query.dim() != self.dim() {
            return Err(StoreError::DimMismatch {
                expected: self.dim(),
                actual: query.dim(),
            });
        }
        Ok(rank(self.records.iter().filter(|r| predicate(r)), query, k))
    }

    /// Content hash over ids, metadata and raw vector bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.manifest.dim as u64).to_le_bytes());
        for r in &self.records {
            for field in [
                &r.record_id,
                &r.image_id,
                &r.question_id,
                &r.question_text,
                &r.answer_text,
            ] {
                h.update((field.len() as u64).to_le_bytes());
                h.update(field.as_bytes());
            }
            h.update(r.question_type.as_str().as_bytes());
            for v in r.embedding.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Ranks `records` against `query` and keeps the best `k`.
///
/// `query` must have the same dimension as every record.
pub(crate) fn rank<'a, I>(records: I, query: &EmbeddingVector, k: usize) -> Vec<Hit<'a>>
where
    I: IntoIterator<Item = &'a SupportRecord>,
{
    // stored vectors are unit length only to f32 precision, so divide the
    // norms out; otherwise near-ties can rank differently from true cosine
    let qn = query.l2_norm();
    let mut hits: Vec<Hit<'a>> = records
        .into_iter()
        .map(|record| Hit {
            record,
            similarity: (dot(query.as_slice(), record.embedding.as_slice())
                / (qn * record.embedding.l2_norm()))
            .clamp(-1.0, 1.0),
        })
        .collect();
    hits.sort_by(|a, b| {
        rank_order(
            a.similarity,
            &a.record.record_id,
            b.similarity,
            &b.record.record_id,
        )
    });
    hits.truncate(k);
    hits
}

// ---------------------------------------------------------------------------
// Sidecar files: a JSON manifest plus little-endian f32 rows.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub record_id: String,
    pub image_id: String,
    pub question_id: String,
    pub question_type: Category,
    pub question_text: String,
    pub answer_text: String,
    pub row_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SidecarManifest {
    #[serde(flatten)]
    pub header: StoreManifest,
    pub records: Vec<SidecarEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads `dim`-wide little-endian f32 rows.
pub fn read_rows(path: &Path, dim: usize) -> Result<Vec<Vec<f32>>, StoreError> {
    if dim == 0 {
        return Err(StoreError::Sidecar("declared dim must be positive".into()));
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let row_bytes = dim * 4;
    if bytes.len() % row_bytes != 0 {
        return Err(StoreError::Sidecar(format!(
            "{} bytes is not a whole number of {dim}-float rows",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(row_bytes)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect())
}

pub fn write_rows<'a, I>(path: &Path, rows: I) -> Result<(), StoreError>
where
    I: IntoIterator<Item = &'a [f32]>,
{
    let mut buf = Vec::new();
    for row in rows {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

impl Store {
    /// Loads a store from a manifest + vector sidecar pair.
    pub fn load_sidecar(manifest_path: &Path, vectors_path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: SidecarManifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::Sidecar(format!("{}: {e}", manifest_path.display())))?;
        let rows = read_rows(vectors_path, manifest.header.dim)?;
        if rows.len() != manifest.records.len() {
            return Err(StoreError::Sidecar(format!(
                "manifest lists {} records but vector file holds {} rows",
                manifest.records.len(),
                rows.len()
            )));
        }
        let mut records = Vec::with_capacity(rows.len());
        for e in manifest.records {
            let row = rows.get(e.row_index).ok_or_else(|| {
                StoreError::Sidecar(format!(
                    "record `{}` points at row {} of {}",
                    e.record_id,
                    e.row_index,
                    rows.len()
                ))
            })?;
            records.push(SupportRecord {
                embedding: normalize(row)?,
                record_id: e.record_id,
                image_id: e.image_id,
                question_id: e.question_id,
                question_type: e.question_type,
                question_text: e.question_text,
                answer_text: e.answer_text,
            });
        }
        Self::ingest(records, manifest.header)
    }

    /// Writes the store as a sidecar pair; rows follow record order.
    pub fn save_sidecar(&self, manifest_path: &Path, vectors_path: &Path) -> Result<(), StoreError> {
        let manifest = SidecarManifest {
            header: self.manifest.clone(),
            records: self
                .records
                .iter()
                .enumerate()
                .map(|(row_index, r)| SidecarEntry {
                    record_id: r.record_id.clone(),
                    image_id: r.image_id.clone(),
                    question_id: r.question_id.clone(),
                    question_type: r.question_type,
                    question_text: r.question_text.clone(),
                    answer_text: r.answer_text.clone(),
                    row_index,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| StoreError::Sidecar(e.to_string()))?;
        fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
        write_rows(
            vectors_path,
            self.records.iter().map(|r| r.embedding.as_slice()),
        )
    }
}

/// Query-image embeddings keyed by image id, for images outside the store.
#[derive(Debug, Clone, Default)]
pub struct ImageEmbeddings {
    dim: usize,
    by_image: std::collections::HashMap<String, EmbeddingVector>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageIndexManifest {
    dim: usize,
    images: Vec<ImageIndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageIndexEntry {
    image_id: String,
    row_index: usize,
}

impl ImageEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            by_image: Default::default(),
        }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, raw: &[f32]) -> Result<(), StoreError> {
        if raw.len() != self.dim {
            return Err(StoreError::DimMismatch {
                expected: self.dim,
                actual: raw.len(),
            });
        }
        self.by_image.insert(image_id.into(), normalize(raw)?);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, image_id: &str) -> Option<&EmbeddingVector> {
        self.by_image.get(image_id)
    }

    pub fn len(&self) -> usize {
        self.by_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }

    /// Loads `{dim, images: [{image_id, row_index}]}` plus a row file.
    pub fn load_sidecar(manifest_path: &Path, vectors_path: &Path) -> Result<Self, StoreError> {
        let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let manifest: ImageIndexManifest = serde_json::from_str(&text)
            .map_err(|e| StoreError::Sidecar(format!("{}: {e}", manifest_path.display())))?;
        let rows = read_rows(vectors_path, manifest.dim)?;
        if rows.len() != manifest.images.len() {
            return Err(StoreError::Sidecar(format!(
                "manifest lists {} images but vector file holds {} rows",
                manifest.images.len(),
                rows.len()
            )));
        }
        let mut out = Self::new(manifest.dim);
        for e in manifest.images {
            let row = rows.get(e.row_index).ok_or_else(|| {
                StoreError::Sidecar(format!("image `{}` points past the row file", e.image_id))
            })?;
            out.insert(e.image_id, row)?;
        }
        Ok(out)
    }

    pub fn save_sidecar(&self, manifest_path: &Path, vectors_path: &Path) -> Result<(), StoreError> {
        let mut ids: Vec<&String> = self.by_image.keys().collect();
        ids.sort();
        let manifest = ImageIndexManifest {
            dim: self.dim,
            images: ids
                .iter()
                .enumerate()
                .map(|(row_index, id)| ImageIndexEntry {
                    image_id: (*id).clone(),
                    row_index,
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| StoreError::Sidecar(e.to_string()))?;
        fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
        write_rows(vectors_path, ids.iter().map(|id| self.by_image[*id].as_slice()))
    }
}
