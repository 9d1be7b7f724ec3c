//! Single-instance execution: mode dispatch, per-call recording, the
//! embedding cache, and the full retrieval/reasoning/scoring pass.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde_json::json;

use crate::agents::{
    agent_candidate, classify_specialty, prompt_digest, CandidatePair, CandidateSet,
    CandidateTag, ChatBackend, ChatError, ChatMessage, GenerationParams, PromptRole, Round,
};
use crate::agents::prompts::{AgentPromptOptions, ExemplarBlock, ExemplarBody};
use crate::corpus::{AnswerLabel, Corpus, CorpusEntry, EvalInstance, OptionList};
use crate::embedding::{EmbeddingIndex, EmbeddingProvider, EmbeddingVector, TextEmbedder};
use crate::retrieval::{stage1_retrieve, stage2_retrieve, ExclusionRule, RetrievalField, RetrievalSet};
use crate::verifier::{aggregate, score_candidate_repeated, ReliabilityScore, VerifierError};

use super::trace::{
    AggregationPayload, ChatCallPayload, InstanceSummary, RetrievalPayload, ScorePayload,
    SpecialtyPayload, TraceRecord, EVENT_INSTANCE_RESULT,
};
use super::{EmbedCache, HarnessError, Mode, PipelineConfig, PipelineDeps};

/// One question heading into the pipeline. `gold` is absent for ad-hoc
/// questions; gold labels are never visible to prompt construction.
#[derive(Debug, Clone)]
pub struct InstanceInput {
    pub id: String,
    pub question: String,
    pub options: OptionList,
    pub gold: Option<AnswerLabel>,
}

impl From<&EvalInstance> for InstanceInput {
    fn from(instance: &EvalInstance) -> Self {
        Self {
            id: instance.id.clone(),
            question: instance.question.clone(),
            options: instance.options.clone(),
            gold: Some(instance.gold),
        }
    }
}

/// Everything one pipeline pass produced, including the audit fields
/// that feed the trace and the report.
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub instance_id: String,
    pub final_answer: Option<AnswerLabel>,
    pub correct: Option<bool>,
    pub abstained: bool,
    pub winner: Option<CandidateTag>,
    pub scores: BTreeMap<CandidateTag, ReliabilityScore>,
    pub candidates: Vec<CandidatePair>,
    pub retrieval: Vec<(String, RetrievalSet)>,
    pub exemplar_ids: Vec<String>,
    pub chat_calls: u64,
    pub embed_calls: u64,
    pub wall_ms: u64,
    pub stage_ms: BTreeMap<String, u64>,
}

impl PipelineResult {
    pub fn summary(&self) -> InstanceSummary {
        InstanceSummary {
            instance_id: self.instance_id.clone(),
            final_answer: self.final_answer,
            correct: self.correct,
            abstained: self.abstained,
            winner: self.winner,
            scores: self.scores.iter().map(|(t, s)| (t.to_string(), s.value)).collect(),
            chat_calls: self.chat_calls,
            embed_calls: self.embed_calls,
            wall_ms: self.wall_ms,
            stage_ms: self.stage_ms.clone(),
        }
    }
}

/// Chronological event buffer for one instance.
struct EventSink {
    instance_id: String,
    events: Mutex<Vec<TraceRecord>>,
}

impl EventSink {
    fn new(instance_id: &str) -> Self {
        Self { instance_id: instance_id.to_string(), events: Mutex::new(Vec::new()) }
    }

    fn push(&self, event_type: &str, payload: serde_json::Value) {
        self.events
            .lock()
            .expect("event sink poisoned")
            .push(TraceRecord::new(event_type, self.instance_id.clone(), payload));
    }

    fn into_events(self) -> Vec<TraceRecord> {
        self.events.into_inner().expect("event sink poisoned")
    }
}

/// Backend wrapper that traces every call (including format-reminder
/// re-asks) and counts them toward the instance budget.
struct RecordingBackend<'a> {
    inner: &'a dyn ChatBackend,
    sink: &'a EventSink,
    calls: &'a AtomicU64,
    label: Mutex<String>,
}

impl<'a> RecordingBackend<'a> {
    fn new(inner: &'a dyn ChatBackend, sink: &'a EventSink, calls: &'a AtomicU64) -> Self {
        Self { inner, sink, calls, label: Mutex::new(String::new()) }
    }

    fn set_label(&self, label: impl Into<String>) {
        *self.label.lock().expect("label poisoned") = label.into();
    }
}

impl ChatBackend for RecordingBackend<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn send(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, ChatError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let label = self.label.lock().expect("label poisoned").clone();
        match self.inner.send(messages, params) {
            Ok(completion) => {
                let payload = ChatCallPayload {
                    label,
                    messages: messages.to_vec(),
                    temperature: params.temperature,
                    max_tokens: params.max_tokens,
                    completion: completion.clone(),
                    prompt_digest: prompt_digest(messages),
                };
                self.sink.push("chat_call", serde_json::to_value(payload).expect("payload serializes"));
                Ok(completion)
            }
            Err(e) => {
                self.sink.push("chat_error", json!({ "label": label, "cause": e.to_string() }));
                Err(e)
            }
        }
    }
}

/// Text embedder with a run-wide cache; only cache misses reach the
/// provider and count as embedding calls.
struct CachingEmbedder<'a> {
    provider: &'a dyn EmbeddingProvider,
    cache: &'a EmbedCache,
    calls: &'a AtomicU64,
}

impl TextEmbedder for CachingEmbedder<'_> {
    fn embed(&self, text: &str) -> Result<EmbeddingVector, crate::embedding::EmbeddingError> {
        if let Some(hit) = self.cache.get(text) {
            return Ok(hit);
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        let vector = crate::embedding::embed_text(self.provider, text)?;
        self.cache.put(text, vector.clone());
        Ok(vector)
    }
}

struct RetrievalDeps<'a> {
    provider: &'a dyn EmbeddingProvider,
    index: &'a EmbeddingIndex,
    corpus: &'a Corpus,
}

fn retrieval_deps<'a>(deps: &'a PipelineDeps<'a>) -> Result<RetrievalDeps<'a>, HarnessError> {
    let provider = deps.provider.ok_or(HarnessError::MissingDependency("embedding provider"))?;
    let index = deps.index.ok_or(HarnessError::MissingDependency("embedding index"))?;
    let corpus = deps.corpus.ok_or(HarnessError::MissingDependency("exemplar corpus"))?;
    crate::embedding::ensure_fingerprint(index, provider)?;
    Ok(RetrievalDeps { provider, index, corpus })
}

fn resolve_exemplars<'a>(
    corpus: &'a Corpus,
    set: &RetrievalSet,
) -> Result<Vec<&'a CorpusEntry>, HarnessError> {
    set.ids()
        .map(|id| corpus.get(id).ok_or_else(|| HarnessError::UnknownExemplar(id.to_string())))
        .collect()
}

fn thought_blocks<'a>(exemplars: &[&'a CorpusEntry]) -> Vec<ExemplarBlock<'a>> {
    exemplars
        .iter()
        .map(|e| ExemplarBlock {
            question: &e.question,
            options: &e.options,
            body: ExemplarBody::Thought(&e.rationale),
        })
        .collect()
}

/// Empty stage-2 result used when a round-1 rationale came back blank;
/// the round-2 prompt degrades to its zero-shot form.
fn empty_rationale_set(k: usize) -> RetrievalSet {
    RetrievalSet { hits: Vec::new(), field: RetrievalField::Rationale, k_requested: k, flagged_empty: true }
}

struct StageClock {
    start: Instant,
    stage_ms: BTreeMap<String, u64>,
}

impl StageClock {
    fn new() -> Self {
        Self { start: Instant::now(), stage_ms: BTreeMap::new() }
    }

    fn lap(&mut self, stage: &str) {
        self.stage_ms.insert(stage.to_string(), self.start.elapsed().as_millis() as u64);
        self.start = Instant::now();
    }
}

/// Run one question through the configured mode. Returns the result plus
/// the ordered trace events for this instance (the final event is the
/// `instance_result` summary).
pub fn run_instance(
    input: &InstanceInput,
    cfg: &PipelineConfig,
    deps: &PipelineDeps<'_>,
) -> Result<(PipelineResult, Vec<TraceRecord>), HarnessError> {
    cfg.validate()?;
    let wall = Instant::now();
    let sink = EventSink::new(&input.id);
    sink.push("instance_start", json!({ "mode": cfg.mode, "question_chars": input.question.len() }));
    let chat_calls = AtomicU64::new(0);
    let embed_calls = AtomicU64::new(0);
    let agent_backend = RecordingBackend::new(deps.backend, &sink, &chat_calls);
    let verifier_backend =
        RecordingBackend::new(deps.verifier_backend.unwrap_or(deps.backend), &sink, &chat_calls);
    let local_cache;
    let cache = match deps.embed_cache {
        Some(shared) => shared,
        None => {
            local_cache = EmbedCache::default();
            &local_cache
        }
    };

    let mut result = match cfg.mode {
        Mode::Tags => run_tags(input, cfg, deps, &sink, &agent_backend, &verifier_backend, cache, &embed_calls)?,
        Mode::ZeroShot | Mode::Cot | Mode::FewShot | Mode::Rag => {
            run_single_call(input, cfg, deps, &sink, &agent_backend, cache, &embed_calls)?
        }
    };

    result.chat_calls = chat_calls.load(Ordering::SeqCst);
    result.embed_calls = embed_calls.load(Ordering::SeqCst);
    result.wall_ms = wall.elapsed().as_millis() as u64;
    result.correct = match (input.gold, result.final_answer) {
        (Some(gold), Some(answer)) => Some(answer == gold),
        (Some(_), None) => Some(false),
        (None, _) => None,
    };
    log::debug!(
        "instance {} finished in {} ms ({} chat, {} embed calls)",
        input.id,
        result.wall_ms,
        result.chat_calls,
        result.embed_calls
    );

    sink.push(
        EVENT_INSTANCE_RESULT,
        serde_json::to_value(result.summary()).expect("summary serializes"),
    );
    Ok((result, sink.into_events()))
}

fn blank_result(input: &InstanceInput) -> PipelineResult {
    PipelineResult {
        instance_id: input.id.clone(),
        final_answer: None,
        correct: None,
        abstained: false,
        winner: None,
        scores: BTreeMap::new(),
        candidates: Vec::new(),
        retrieval: Vec::new(),
        exemplar_ids: Vec::new(),
        chat_calls: 0,
        embed_calls: 0,
        wall_ms: 0,
        stage_ms: BTreeMap::new(),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_tags(
    input: &InstanceInput,
    cfg: &PipelineConfig,
    deps: &PipelineDeps<'_>,
    sink: &EventSink,
    agent_backend: &RecordingBackend<'_>,
    verifier_backend: &RecordingBackend<'_>,
    cache: &EmbedCache,
    embed_calls: &AtomicU64,
) -> Result<PipelineResult, HarnessError> {
    let retrieval = retrieval_deps(deps)?;
    let embedder = CachingEmbedder { provider: retrieval.provider, cache, calls: embed_calls };
    let params = &cfg.generation;
    let mut clock = StageClock::new();
    let mut result = blank_result(input);

    // Specialty inference gates round 1.
    agent_backend.set_label("specialty");
    let specialty =
        classify_specialty(agent_backend, &input.question, &input.options, params, cfg.specialist_rank)?;
    sink.push(
        "specialty",
        serde_json::to_value(SpecialtyPayload {
            ranked_fields: specialty.ranked_fields.clone(),
            chosen_rank: specialty.chosen_rank,
            chosen: specialty.chosen().to_string(),
        })
        .expect("payload serializes"),
    );
    clock.lap("specialty");

    // Stage 1: shared semantic exemplars.
    let exclusion = ExclusionRule { excluded_ids: Default::default(), exclude_top_n: cfg.exclude_top_n };
    let (t1, query_vec) = stage1_retrieve(
        retrieval.index,
        &embedder,
        &input.question,
        &input.options,
        cfg.k,
        &exclusion,
    )?;
    sink.push(
        "retrieval",
        serde_json::to_value(RetrievalPayload {
            stage: "stage1".into(),
            set: t1.clone(),
            query_embedding: Some(query_vec),
        })
        .expect("payload serializes"),
    );
    let exemplars1 = resolve_exemplars(retrieval.corpus, &t1)?;
    let blocks1 = thought_blocks(&exemplars1);
    result.exemplar_ids = t1.ids().map(String::from).collect();
    result.retrieval.push(("stage1".into(), t1.clone()));
    clock.lap("stage1");

    // Round 1: both agents share the stage-1 exemplars.
    agent_backend.set_label("round1/generalist");
    let g1 = agent_candidate(
        agent_backend,
        &PromptRole::Generalist,
        CandidateTag::generalist(Round::One),
        &input.question,
        &input.options,
        &blocks1,
        AgentPromptOptions::default(),
        params,
    )?;
    let mut s1 = Vec::new();
    for slot in 0..cfg.specialist_count {
        agent_backend.set_label(format!("round1/specialist{}", slot + 1));
        s1.push(agent_candidate(
            agent_backend,
            &PromptRole::Specialist(specialty.field_for_slot(slot as u8).to_string()),
            CandidateTag::specialist_slot(Round::One, slot as u8),
            &input.question,
            &input.options,
            &blocks1,
            AgentPromptOptions::default(),
            params,
        )?);
    }
    clock.lap("round1");

    // Stage 2: one rationale-aligned retrieval per agent.
    let mut stage2_exclusion = exclusion.clone();
    if cfg.cross_stage_exclusion {
        stage2_exclusion.excluded_ids.extend(t1.ids().map(String::from));
    }
    let stage2 = |label: &str, rationale: &str| -> Result<RetrievalSet, HarnessError> {
        let (set, vec) = if rationale.trim().is_empty() {
            log::warn!("{label}: empty round-1 rationale, round 2 degrades to zero-shot");
            (empty_rationale_set(cfg.k), None)
        } else {
            let (set, vec) =
                stage2_retrieve(retrieval.index, &embedder, rationale, cfg.k, &stage2_exclusion)?;
            (set, Some(vec))
        };
        sink.push(
            "retrieval",
            serde_json::to_value(RetrievalPayload {
                stage: label.to_string(),
                set: set.clone(),
                query_embedding: vec,
            })
            .expect("payload serializes"),
        );
        Ok(set)
    };
    let tg2 = stage2("stage2/generalist", &g1.rationale)?;
    let mut ts2 = Vec::new();
    for (slot, candidate) in s1.iter().enumerate() {
        ts2.push(stage2(&format!("stage2/specialist{}", slot + 1), &candidate.rationale)?);
    }
    result.retrieval.push(("stage2/generalist".into(), tg2.clone()));
    for (slot, set) in ts2.iter().enumerate() {
        result.retrieval.push((format!("stage2/specialist{}", slot + 1), set.clone()));
    }
    clock.lap("stage2");

    // Round 2: per-agent exemplars; round-1 text only with the carry knob.
    let g2_exemplars = resolve_exemplars(retrieval.corpus, &tg2)?;
    let g2_blocks = thought_blocks(&g2_exemplars);
    agent_backend.set_label("round2/generalist");
    let g2 = agent_candidate(
        agent_backend,
        &PromptRole::Generalist,
        CandidateTag::generalist(Round::Two),
        &input.question,
        &input.options,
        &g2_blocks,
        AgentPromptOptions {
            cot_instruction: false,
            prior_rationale: cfg.include_round1_in_round2.then_some(g1.rationale.as_str()),
        },
        params,
    )?;
    let mut s2 = Vec::new();
    for (slot, set) in ts2.iter().enumerate() {
        let exemplars = resolve_exemplars(retrieval.corpus, set)?;
        let blocks = thought_blocks(&exemplars);
        agent_backend.set_label(format!("round2/specialist{}", slot + 1));
        s2.push(agent_candidate(
            agent_backend,
            &PromptRole::Specialist(specialty.field_for_slot(slot as u8).to_string()),
            CandidateTag::specialist_slot(Round::Two, slot as u8),
            &input.question,
            &input.options,
            &blocks,
            AgentPromptOptions {
                cot_instruction: false,
                prior_rationale: cfg
                    .include_round1_in_round2
                    .then_some(s1[slot].rationale.as_str()),
            },
            params,
        )?);
    }
    clock.lap("round2");

    // Scoring and aggregation.
    let set = CandidateSet::from_rounds(g1, s1, g2, s2)?;
    let mut scores = BTreeMap::new();
    for candidate in set.iter() {
        verifier_backend.set_label(format!("score/{}", candidate.tag));
        let score = score_candidate_repeated(
            verifier_backend,
            &input.question,
            &input.options,
            candidate,
            params,
            cfg.verifier_repeats,
        )?;
        sink.push(
            "score",
            serde_json::to_value(ScorePayload {
                tag: candidate.tag,
                value: score.value,
                repeats: cfg.verifier_repeats,
            })
            .expect("payload serializes"),
        );
        scores.insert(candidate.tag, score);
    }
    clock.lap("scoring");

    match aggregate(&set, &scores) {
        Ok(agg) => {
            sink.push(
                "aggregation",
                serde_json::to_value(AggregationPayload {
                    winner: agg.winner,
                    final_answer: agg.final_answer,
                    tie_broken: agg.tie_broken,
                    tied_members: agg.tied_members.clone(),
                })
                .expect("payload serializes"),
            );
            result.final_answer = Some(agg.final_answer);
            result.winner = Some(agg.winner);
        }
        Err(VerifierError::AbstainAllDegenerate) => {
            log::warn!("instance {}: every candidate degenerate, abstaining", input.id);
            sink.push("aggregation", json!({ "abstained": true }));
            result.abstained = true;
        }
        Err(e) => return Err(e.into()),
    }
    clock.lap("aggregate");

    result.scores = scores;
    result.candidates = set.iter().cloned().collect();
    result.stage_ms = clock.stage_ms;
    Ok(result)
}

/// The single-call baselines: a lone generalist completion with
/// mode-specific context. Neither the verifier nor (for zero-shot and
/// chain-of-thought) the index is touched.
fn run_single_call(
    input: &InstanceInput,
    cfg: &PipelineConfig,
    deps: &PipelineDeps<'_>,
    sink: &EventSink,
    agent_backend: &RecordingBackend<'_>,
    cache: &EmbedCache,
    embed_calls: &AtomicU64,
) -> Result<PipelineResult, HarnessError> {
    let params = &cfg.generation;
    let mut clock = StageClock::new();
    let mut result = blank_result(input);

    let mut prompt_opts = AgentPromptOptions::default();
    let retrieved: Vec<CorpusEntry>;
    let mut blocks: Vec<ExemplarBlock<'_>> = Vec::new();
    match cfg.mode {
        Mode::ZeroShot => {}
        Mode::Cot => prompt_opts.cot_instruction = true,
        Mode::FewShot if deps.fewshot_pool.is_some() => {
            blocks = deps
                .fewshot_pool
                .expect("checked above")
                .iter()
                .take(cfg.fewshot_count)
                .map(|d| ExemplarBlock {
                    question: &d.question,
                    options: &d.options,
                    body: match &d.rationale {
                        Some(rationale) => ExemplarBody::Thought(rationale),
                        None => ExemplarBody::Answer(d.answer),
                    },
                })
                .collect();
        }
        Mode::FewShot | Mode::Rag => {
            if cfg.mode == Mode::FewShot {
                log::warn!(
                    "few-shot mode has no train split; falling back to corpus retrieval"
                );
            }
            let retrieval = retrieval_deps(deps)?;
            let embedder = CachingEmbedder { provider: retrieval.provider, cache, calls: embed_calls };
            let exclusion =
                ExclusionRule { excluded_ids: Default::default(), exclude_top_n: cfg.exclude_top_n };
            let (t1, query_vec) = stage1_retrieve(
                retrieval.index,
                &embedder,
                &input.question,
                &input.options,
                cfg.k,
                &exclusion,
            )?;
            sink.push(
                "retrieval",
                serde_json::to_value(RetrievalPayload {
                    stage: "stage1".into(),
                    set: t1.clone(),
                    query_embedding: Some(query_vec),
                })
                .expect("payload serializes"),
            );
            result.exemplar_ids = t1.ids().map(String::from).collect();
            result.retrieval.push(("stage1".into(), t1.clone()));
            retrieved = resolve_exemplars(retrieval.corpus, &t1)?
                .into_iter()
                .cloned()
                .collect::<Vec<_>>();
            blocks = retrieved
                .iter()
                .map(|e| ExemplarBlock {
                    question: &e.question,
                    options: &e.options,
                    body: ExemplarBody::Thought(&e.rationale),
                })
                .collect();
        }
        Mode::Tags => unreachable!("tags mode is handled by run_tags"),
    }
    clock.lap("context");

    agent_backend.set_label(format!("{}/generalist", cfg.mode));
    let candidate = agent_candidate(
        agent_backend,
        &PromptRole::Generalist,
        CandidateTag::generalist(Round::One),
        &input.question,
        &input.options,
        &blocks,
        prompt_opts,
        params,
    )?;
    clock.lap("completion");

    result.final_answer = candidate.answer;
    result.abstained = candidate.is_degenerate();
    result.candidates = vec![candidate];
    result.stage_ms = clock.stage_ms;
    Ok(result)
}
