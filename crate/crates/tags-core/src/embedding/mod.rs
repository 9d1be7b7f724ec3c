//! Embedding vectors, cosine similarity, providers, and the persisted
//! dual-field vector index.
//!
//! Raw provider outputs are L2-normalized at ingestion so that cosine
//! similarity reduces to a single dot-product pass. Vectors are 64-bit
//! floats in memory and 32-bit floats in the index file; a loaded index
//! therefore round-trips bitwise through save/load, while a freshly
//! built one is within f32 quantization (< 1e-7 per component) of its
//! on-disk form.

mod index_io;
mod provider;

pub use index_io::{build_index, ensure_fingerprint, load_index, save_index, BuildOptions, BuildStats};
pub use provider::{
    embed_text, DeterministicProvider, EmbeddingProvider, HttpEmbeddingProvider,
    HttpProviderConfig, ProviderEmbedder, TextEmbedder,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;

/// Default encoder output width.
pub const DEFAULT_DIM: usize = 1024;

/// How far a stored vector's L2 norm may drift from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding provider unavailable: {cause}")]
    ProviderUnavailable { cause: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("corrupt index: {0}")]
    CorruptIndex(String),
    #[error("index fingerprint {index:?} does not match provider fingerprint {provider:?}")]
    FingerprintMismatch { index: String, provider: String },
    #[error("duplicate index row id {0:?}")]
    DuplicateRowId(String),
    #[error("invalid embedding payload: {0}")]
    InvalidVector(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A unit-length dense vector of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// Normalize a raw provider output to unit length.
    pub fn from_raw(raw: &[f64]) -> Result<Self, EmbeddingError> {
        if raw.is_empty() {
            return Err(EmbeddingError::InvalidVector("zero-length vector".into()));
        }
        if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidVector(format!("non-finite component {bad}")));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EmbeddingError::InvalidVector("vector norm is zero".into()));
        }
        Ok(Self { values: raw.iter().map(|v| v / norm).collect() })
    }

    /// Accept values that are already unit-length within
    /// [`UNIT_NORM_TOLERANCE`] (the index load path).
    pub fn from_unit_values(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::InvalidVector("zero-length vector".into()));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidVector(format!("non-finite component {bad}")));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::InvalidVector(format!(
                "vector norm {norm} outside unit tolerance"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The vector with every component rounded through f32, as it will
    /// read back from an index file.
    pub fn quantized_f32(&self) -> Self {
        Self { values: self.values.iter().map(|v| *v as f32 as f64).collect() }
    }
}

/// Cosine similarity of two unit vectors: their dot product, clamped to
/// `[-1, 1]` against rounding. Summation runs in index order regardless
/// of operand order, so `cosine_similarity(a, b)` equals
/// `cosine_similarity(b, a)` exactly.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    Ok(dot_clamped(a.values(), b.values()))
}

/// Dot product over pre-validated equal-length unit vectors.
pub(crate) fn dot_clamped(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        sum += a[i] * b[i];
    }
    sum.clamp(-1.0, 1.0)
}

/// One index row: both field vectors for a corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexRow {
    pub id: String,
    pub query_vec: EmbeddingVector,
    pub rationale_vec: EmbeddingVector,
}

/// Per-entry query-text and rationale vectors for a corpus, tagged with
/// the fingerprint of the provider that produced them.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    dim: usize,
    provider_fingerprint: String,
    rows: Vec<IndexRow>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, provider_fingerprint: impl Into<String>) -> Self {
        Self { dim, provider_fingerprint: provider_fingerprint.into(), rows: Vec::new(), by_id: HashMap::new() }
    }

    pub fn push_row(&mut self, row: IndexRow) -> Result<(), EmbeddingError> {
        for vec in [&row.query_vec, &row.rationale_vec] {
            if vec.dim() != self.dim {
                return Err(EmbeddingError::DimensionMismatch { expected: self.dim, got: vec.dim() });
            }
        }
        if self.by_id.contains_key(&row.id) {
            return Err(EmbeddingError::DuplicateRowId(row.id));
        }
        self.by_id.insert(row.id.clone(), self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_fingerprint(&self) -> &str {
        &self.provider_fingerprint
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn get(&self, id: &str) -> Option<&IndexRow> {
        self.by_id.get(id).map(|&i| &self.rows[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.id.as_str())
    }

    /// Whether the row ids equal the corpus ids as a set.
    pub fn matches_corpus(&self, corpus: &Corpus) -> bool {
        self.rows.len() == corpus.len() && corpus.ids().all(|id| self.by_id.contains_key(id))
    }
}
