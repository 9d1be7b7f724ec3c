//! Two-stage exemplar retrieval: exact top-K cosine search over the
//! dual-field index with exclusion controls.
//!
//! Stage 1 ranks corpus entries by similarity between the embedded
//! query text (question plus options) and the stored query-text
//! vectors. Stage 2 runs once per agent after round 1, ranking entries
//! by similarity between the agent's generated rationale and the stored
//! rationale vectors. Both stages share [`top_k`], which is an exact
//! (non-approximate) full scan: ties break by ascending entry id so
//! results are reproducible.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{render_query_text, OptionList};
use crate::embedding::{EmbeddingError, EmbeddingIndex, EmbeddingVector, TextEmbedder};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: query dim {query} vs index dim {index}")]
    DimensionMismatch { query: usize, index: usize },
    #[error("round-1 output contained no rationale text to embed")]
    EmptyRationale,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Which stored vector a search runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalField {
    QueryText,
    Rationale,
}

/// Entries removed from consideration before taking the top K.
/// `exclude_top_n` drops the n most similar eligible entries first,
/// so with `exclude_top_n = 10` the best returned hit is the oracle's
/// rank 11.
#[derive(Debug, Clone, Default)]
pub struct ExclusionRule {
    pub excluded_ids: HashSet<String>,
    pub exclude_top_n: usize,
}

impl ExclusionRule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn drop_top(n: usize) -> Self {
        Self { excluded_ids: HashSet::new(), exclude_top_n: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub entry_id: String,
    pub score: f64,
    /// 1-based rank within this result set.
    pub rank: u32,
}

/// An ordered retrieval result. `flagged_empty` marks the degenerate
/// case where k > 0 but the index had no eligible rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub hits: Vec<RetrievalHit>,
    pub field: RetrievalField,
    pub k_requested: usize,
    pub flagged_empty: bool,
}

impl RetrievalSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.entry_id.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }
}

/// Row count below which the parallel scan is not worth its overhead.
#[cfg(feature = "parallel")]
const PARALLEL_THRESHOLD: usize = 512;

/// Similarity scan kernels. Both produce identical scores; `top_k`
/// dispatches between them based on index size and the `parallel`
/// feature.
pub mod scan {
    use super::*;
    use crate::embedding::IndexRow;

    pub(super) fn field_values(row: &IndexRow, field: RetrievalField) -> &[f64] {
        match field {
            RetrievalField::QueryText => row.query_vec.values(),
            RetrievalField::Rationale => row.rationale_vec.values(),
        }
    }

    /// Score every row against the query, sequentially.
    pub fn sequential(rows: &[&IndexRow], query: &[f64], field: RetrievalField) -> Vec<f64> {
        rows.iter()
            .map(|row| crate::embedding::dot_clamped(query, field_values(row, field)))
            .collect()
    }

    /// Score every row against the query across the rayon pool. Scores
    /// are bitwise identical to [`sequential`].
    #[cfg(feature = "parallel")]
    pub fn parallel(rows: &[&IndexRow], query: &[f64], field: RetrievalField) -> Vec<f64> {
        use rayon::prelude::*;
        rows.par_iter()
            .map(|row| crate::embedding::dot_clamped(query, field_values(row, field)))
            .collect()
    }
}

/// Exact top-k by cosine over the chosen field: excluded ids are removed,
/// remaining rows are ranked (score descending, id ascending on ties),
/// the best `exclude_top_n` are dropped, and the next k are returned.
pub fn top_k(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    field: RetrievalField,
    k: usize,
    exclusion: &ExclusionRule,
) -> Result<RetrievalSet, RetrievalError> {
    if query.dim() != index.dim() {
        return Err(RetrievalError::DimensionMismatch { query: query.dim(), index: index.dim() });
    }
    let eligible: Vec<&crate::embedding::IndexRow> = index
        .rows()
        .iter()
        .filter(|row| !exclusion.excluded_ids.contains(&row.id))
        .collect();
    let flagged_empty = eligible.is_empty() && k > 0;

    #[cfg(feature = "parallel")]
    let scores = if eligible.len() >= PARALLEL_THRESHOLD {
        scan::parallel(&eligible, query.values(), field)
    } else {
        scan::sequential(&eligible, query.values(), field)
    };
    #[cfg(not(feature = "parallel"))]
    let scores = scan::sequential(&eligible, query.values(), field);

    let mut ranked: Vec<(&str, f64)> =
        eligible.iter().map(|r| r.id.as_str()).zip(scores).collect();
    ranked.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));

    let hits = ranked
        .into_iter()
        .skip(exclusion.exclude_top_n)
        .take(k)
        .enumerate()
        .map(|(i, (id, score))| RetrievalHit { entry_id: id.to_string(), score, rank: i as u32 + 1 })
        .collect();
    Ok(RetrievalSet { hits, field, k_requested: k, flagged_empty })
}

/// Stage 1: embed the rendered question-plus-options text once and rank
/// by the query-text field. The query embedding is returned alongside
/// the hits so callers can record it in the trace.
pub fn stage1_retrieve(
    index: &EmbeddingIndex,
    embedder: &dyn TextEmbedder,
    question: &str,
    options: &OptionList,
    k: usize,
    exclusion: &ExclusionRule,
) -> Result<(RetrievalSet, EmbeddingVector), RetrievalError> {
    let query = embedder.embed(&render_query_text(question, options))?;
    let set = top_k(index, &query, RetrievalField::QueryText, k, exclusion)?;
    Ok((set, query))
}

/// Stage 2: embed an agent's round-1 rationale and rank by the stored
/// rationale field. Called once per agent, so the two agents can receive
/// different exemplar sets.
pub fn stage2_retrieve(
    index: &EmbeddingIndex,
    embedder: &dyn TextEmbedder,
    rationale_text: &str,
    k: usize,
    exclusion: &ExclusionRule,
) -> Result<(RetrievalSet, EmbeddingVector), RetrievalError> {
    if rationale_text.trim().is_empty() {
        return Err(RetrievalError::EmptyRationale);
    }
    let query = embedder.embed(rationale_text)?;
    let set = top_k(index, &query, RetrievalField::Rationale, k, exclusion)?;
    Ok((set, query))
}
