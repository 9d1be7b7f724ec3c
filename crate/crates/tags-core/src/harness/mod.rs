//! End-to-end pipeline runner: configuration, baseline modes, Pass@1
//! computation, resumable evaluation runs, and persisted audit traces.
//!
//! Instances are processed by a worker pool of configurable width. Trace
//! events are released strictly in dataset order through a single
//! writer, so two runs under a deterministic backend produce
//! byte-identical traces (modulo timestamps) at any pool width.

pub mod pipeline;
pub mod trace;

pub use pipeline::{run_instance, InstanceInput, PipelineResult};
pub use trace::{read_trace, InstanceSummary, TraceRecord, TraceWriter};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{mpsc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, ChatBackend, ChatError, GenerationParams};
use crate::corpus::{Corpus, CorpusError, EvalInstance, FewShotDemo};
use crate::embedding::{
    ensure_fingerprint, EmbeddingError, EmbeddingIndex, EmbeddingProvider, EmbeddingVector,
};
use crate::retrieval::RetrievalError;
use crate::verifier::VerifierError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("dataset contains no instances")]
    EmptyDataset,
    #[error("trace line {line}: {reason}")]
    TraceCorrupt { line: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pipeline mode requires a {0}, but none was supplied")]
    MissingDependency(&'static str),
    #[error("index ids do not match the corpus ids")]
    IndexCorpusMismatch,
    #[error("index hit {0:?} is not present in the corpus")]
    UnknownExemplar(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Chat(#[from] ChatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pipeline execution modes: the full pipeline plus the single-call
/// baselines it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ZeroShot,
    FewShot,
    Rag,
    Cot,
    Tags,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::ZeroShot => "zero-shot",
            Mode::FewShot => "few-shot",
            Mode::Rag => "rag",
            Mode::Cot => "cot",
            Mode::Tags => "tags",
        };
        f.write_str(s)
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero-shot" => Ok(Mode::ZeroShot),
            "few-shot" => Ok(Mode::FewShot),
            "rag" => Ok(Mode::Rag),
            "cot" => Ok(Mode::Cot),
            "tags" => Ok(Mode::Tags),
            other => Err(format!(
                "unknown mode {other:?}; expected zero-shot, few-shot, rag, cot or tags"
            )),
        }
    }
}

/// All pipeline knobs. Defaults follow the reference configuration:
/// two exemplars per retrieval set and a single top-ranked specialist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Exemplars per retrieval set.
    pub k: usize,
    /// Drop the n most similar entries before taking k (ablation knob).
    pub exclude_top_n: usize,
    /// Which of the three classified fields the specialist takes
    /// (3 reproduces the misassigned-specialist ablation).
    pub specialist_rank: u8,
    pub specialist_count: u32,
    /// Recorded in report snapshots for provenance; the pipeline itself
    /// is deterministic at temperature 0 with deterministic backends.
    pub seed: i64,
    /// Evaluation worker-pool width. Trace output order is independent
    /// of this.
    pub workers: usize,
    /// Exclude stage-1 hits from stage-2 results.
    pub cross_stage_exclusion: bool,
    /// Include each agent's round-1 rationale in its round-2 prompt.
    pub include_round1_in_round2: bool,
    /// Scoring calls per candidate, aggregated by mean then rounded.
    pub verifier_repeats: u32,
    /// Demonstrations drawn from the train split in few-shot mode.
    pub fewshot_count: usize,
    pub generation: GenerationParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tags,
            k: 2,
            exclude_top_n: 0,
            specialist_rank: 1,
            specialist_count: 1,
            seed: 0,
            workers: 1,
            cross_stage_exclusion: false,
            include_round1_in_round2: false,
            verifier_repeats: 1,
            fewshot_count: 5,
            generation: GenerationParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(1..=3).contains(&self.specialist_rank) {
            return Err(HarnessError::Config(format!(
                "specialist_rank must be 1, 2 or 3, got {}",
                self.specialist_rank
            )));
        }
        if !(1..=64).contains(&self.specialist_count) {
            return Err(HarnessError::Config(format!(
                "specialist_count must be between 1 and 64, got {}",
                self.specialist_count
            )));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be at least 1".into()));
        }
        if self.verifier_repeats == 0 {
            return Err(HarnessError::Config("verifier_repeats must be at least 1".into()));
        }
        if self.fewshot_count == 0 {
            return Err(HarnessError::Config("fewshot_count must be at least 1".into()));
        }
        if self.generation.temperature.is_nan() || self.generation.temperature < 0.0 {
            return Err(HarnessError::Config(format!(
                "temperature must be non-negative, got {}",
                self.generation.temperature
            )));
        }
        if self.generation.max_tokens == 0 {
            return Err(HarnessError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Run-wide cache from text to unit embedding. Shared across instances
/// so repeated texts cost one provider call. Entries are keyed by text
/// alone, so a cache must never be reused across different providers.
#[derive(Default)]
pub struct EmbedCache {
    map: Mutex<HashMap<String, EmbeddingVector>>,
}

impl EmbedCache {
    pub fn get(&self, text: &str) -> Option<EmbeddingVector> {
        self.map.lock().expect("embed cache poisoned").get(text).cloned()
    }

    pub fn put(&self, text: &str, vector: EmbeddingVector) {
        self.map.lock().expect("embed cache poisoned").insert(text.to_string(), vector);
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("embed cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared, read-only dependencies for a run. `verifier_backend` falls
/// back to `backend` when absent; retrieval dependencies are only
/// required by modes that touch the index.
pub struct PipelineDeps<'a> {
    pub backend: &'a dyn ChatBackend,
    pub verifier_backend: Option<&'a dyn ChatBackend>,
    pub provider: Option<&'a dyn EmbeddingProvider>,
    pub index: Option<&'a EmbeddingIndex>,
    pub corpus: Option<&'a Corpus>,
    pub fewshot_pool: Option<&'a [FewShotDemo]>,
    pub embed_cache: Option<&'a EmbedCache>,
}

/// Configuration provenance stored in reports and run_start records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub pipeline: PipelineConfig,
    pub backend: String,
    pub verifier_backend: String,
    pub provider: Option<String>,
    pub dataset: String,
}

/// The evaluation report: Pass@1 plus one summary row per instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset_name: String,
    pub n: usize,
    pub n_correct: usize,
    pub pass_at_1: f64,
    pub per_instance: Vec<InstanceSummary>,
    pub config: ConfigSnapshot,
}

/// Exact-match accuracy: the fraction of rows whose first produced
/// answer equals the gold label. No partial credit.
pub fn pass_at_1(per_instance: &[InstanceSummary]) -> f64 {
    if per_instance.is_empty() {
        return 0.0;
    }
    let correct = per_instance.iter().filter(|s| s.correct == Some(true)).count();
    correct as f64 / per_instance.len() as f64
}

fn snapshot(deps: &PipelineDeps<'_>, cfg: &PipelineConfig, dataset: &str) -> ConfigSnapshot {
    ConfigSnapshot {
        pipeline: cfg.clone(),
        backend: deps.backend.name().to_string(),
        verifier_backend: deps.verifier_backend.unwrap_or(deps.backend).name().to_string(),
        provider: deps.provider.map(|p| p.fingerprint()),
        dataset: dataset.to_string(),
    }
}

fn check_retrieval_setup(cfg: &PipelineConfig, deps: &PipelineDeps<'_>) -> Result<(), HarnessError> {
    let needs_index = match cfg.mode {
        Mode::Tags | Mode::Rag => true,
        Mode::FewShot => deps.fewshot_pool.is_none(),
        Mode::ZeroShot | Mode::Cot => false,
    };
    if !needs_index {
        return Ok(());
    }
    let provider = deps.provider.ok_or(HarnessError::MissingDependency("embedding provider"))?;
    let index = deps.index.ok_or(HarnessError::MissingDependency("embedding index"))?;
    let corpus = deps.corpus.ok_or(HarnessError::MissingDependency("exemplar corpus"))?;
    ensure_fingerprint(index, provider)?;
    if !index.matches_corpus(corpus) {
        return Err(HarnessError::IndexCorpusMismatch);
    }
    Ok(())
}

type InstanceOutcome = Result<(PipelineResult, Vec<TraceRecord>), HarnessError>;

/// Run a dataset through the pipeline, streaming per-instance events to
/// the trace file as they complete (in dataset order). With `resume`,
/// instances whose results already sit in the trace are skipped and
/// their recorded summaries reused; a rerun over a complete trace makes
/// no backend calls.
pub fn run_eval(
    dataset: &[EvalInstance],
    dataset_name: &str,
    cfg: &PipelineConfig,
    deps: &PipelineDeps<'_>,
    trace_path: &Path,
    resume: bool,
) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    check_retrieval_setup(cfg, deps)?;

    let snapshot = snapshot(deps, cfg, dataset_name);
    let existing = if resume && trace_path.exists() { read_trace(trace_path)? } else { Vec::new() };
    let done = trace::completed_summaries(&existing);
    let mut writer;
    if existing.is_empty() {
        writer = TraceWriter::create(trace_path)?;
        writer.write(&TraceRecord::new(
            trace::EVENT_RUN_START,
            "",
            serde_json::to_value(&snapshot).expect("snapshot serializes"),
        ))?;
    } else {
        if let Some(start) = existing.iter().find(|r| r.event_type == trace::EVENT_RUN_START) {
            let prior: Option<ConfigSnapshot> = serde_json::from_value(start.payload.clone()).ok();
            if prior.as_ref().map(|p| &p.pipeline) != Some(&snapshot.pipeline) {
                log::warn!("resuming a trace recorded under a different pipeline configuration");
            }
        }
        writer = TraceWriter::append(trace_path)?;
        log::info!("resuming: {} of {} instances already complete", done.len(), dataset.len());
    }

    let pending: Vec<(usize, &EvalInstance)> =
        dataset.iter().enumerate().filter(|(_, inst)| !done.contains_key(&inst.id)).collect();

    let mut fresh: BTreeMap<usize, InstanceSummary> = BTreeMap::new();
    let workers = cfg.workers.min(pending.len().max(1));
    if workers <= 1 {
        for (idx, inst) in &pending {
            let (result, events) = run_instance(&InstanceInput::from(*inst), cfg, deps)?;
            for event in &events {
                writer.write(event)?;
            }
            fresh.insert(*idx, result.summary());
        }
    } else {
        run_pool(&pending, workers, cfg, deps, &mut writer, &mut fresh)?;
    }

    let mut per_instance = Vec::with_capacity(dataset.len());
    for (idx, inst) in dataset.iter().enumerate() {
        let summary = done
            .get(&inst.id)
            .cloned()
            .or_else(|| fresh.get(&idx).cloned())
            .expect("every instance is either resumed or freshly run");
        per_instance.push(summary);
    }
    let n = per_instance.len();
    let n_correct = per_instance.iter().filter(|s| s.correct == Some(true)).count();
    Ok(EvalReport {
        dataset_name: dataset_name.to_string(),
        n,
        n_correct,
        pass_at_1: pass_at_1(&per_instance),
        per_instance,
        config: snapshot,
    })
}

/// Fixed-width worker pool over the pending instances. Workers pull from
/// a shared queue; the caller thread releases finished instances to the
/// writer strictly in dataset order, so trace bytes do not depend on
/// scheduling.
fn run_pool(
    pending: &[(usize, &EvalInstance)],
    workers: usize,
    cfg: &PipelineConfig,
    deps: &PipelineDeps<'_>,
    writer: &mut TraceWriter,
    fresh: &mut BTreeMap<usize, InstanceSummary>,
) -> Result<(), HarnessError> {
    let queue = Mutex::new(pending.iter().copied());
    let (tx, rx) = mpsc::channel::<(usize, InstanceOutcome)>();
    let order: Vec<usize> = pending.iter().map(|(i, _)| *i).collect();

    std::thread::scope(|scope| -> Result<(), HarnessError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let queue = &queue;
            scope.spawn(move || loop {
                let next = queue.lock().expect("work queue poisoned").next();
                let Some((idx, inst)) = next else { break };
                let outcome = run_instance(&InstanceInput::from(inst), cfg, deps);
                if tx.send((idx, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffered: BTreeMap<usize, InstanceOutcome> = BTreeMap::new();
        let mut next_pos = 0usize;
        for (idx, outcome) in rx {
            buffered.insert(idx, outcome);
            while next_pos < order.len() {
                let Some(outcome) = buffered.remove(&order[next_pos]) else { break };
                let (result, events) = outcome.inspect_err(|_| {
                    // Stop handing out new work; in-flight instances finish
                    // and their sends are dropped with the receiver.
                    queue.lock().expect("work queue poisoned").by_ref().for_each(drop);
                })?;
                for event in &events {
                    writer.write(event)?;
                }
                fresh.insert(order[next_pos], result.summary());
                next_pos += 1;
            }
        }
        Ok(())
    })
}
