//! Inference-time orchestration engine for multiple-choice medical QA.
//!
//! The pipeline answers a question in three phases: two-stage exemplar
//! retrieval over a rationale-annotated corpus (semantic first, then
//! rationale-aligned), generalist/specialist chain-of-thought generation
//! against a pluggable chat backend, and consistency-scored aggregation
//! that selects the most reliable of the four candidate answers. A
//! benchmark harness runs evaluation datasets through the pipeline and
//! reports Pass@1 accuracy with full audit traces.
//!
//! Module map:
//!
//! - [`corpus`] — data model and ingestion for exemplar corpora and
//!   evaluation datasets
//! - [`embedding`] — embedding providers, cosine similarity, and the
//!   persisted dual-field vector index
//! - [`retrieval`] — exact top-K search with exclusion controls and the
//!   two retrieval stages
//! - [`agents`] — chat backends, the prompt catalog, specialty
//!   inference, and the two reasoning rounds
//! - [`verifier`] — reliability scoring and final-answer aggregation
//! - [`harness`] — end-to-end pipeline runner, baseline modes, Pass@1,
//!   and audit traces
//!
//! The `parallel` feature (on by default) backs the similarity scan and
//! batch index building with rayon; without it every code path falls
//! back to sequential execution with identical results.

pub mod agents;
pub mod corpus;
pub mod embedding;
pub mod harness;
pub mod retrieval;
pub mod verifier;
