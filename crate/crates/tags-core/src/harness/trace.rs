//! Append-only audit traces: one JSON record per pipeline event, keyed
//! by instance id. Completed-instance records double as the resume
//! ledger for interrupted runs.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::agents::{CandidateTag, ChatMessage};
use crate::corpus::AnswerLabel;
use crate::embedding::EmbeddingVector;
use crate::retrieval::RetrievalSet;

use super::HarnessError;

pub const EVENT_RUN_START: &str = "run_start";
pub const EVENT_INSTANCE_RESULT: &str = "instance_result";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub event_type: String,
    pub instance_id: String,
    pub ts_ms: u64,
    pub payload: Value,
}

impl TraceRecord {
    pub fn new(event_type: impl Into<String>, instance_id: impl Into<String>, payload: Value) -> Self {
        let ts_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Self { event_type: event_type.into(), instance_id: instance_id.into(), ts_ms, payload }
    }
}

/// Single-writer trace sink. Every record is flushed as written so an
/// interrupted run leaves a valid prefix.
pub struct TraceWriter {
    w: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        Ok(Self { w: BufWriter::new(File::create(path)?) })
    }

    pub fn append(path: &Path) -> Result<Self, HarnessError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { w: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<(), HarnessError> {
        let line = serde_json::to_string(record).expect("trace records serialize");
        self.w.write_all(line.as_bytes())?;
        self.w.write_all(b"\n")?;
        self.w.flush()?;
        Ok(())
    }
}

/// Read a whole trace file, failing with the offending line number on
/// corrupt records.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, HarnessError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| HarnessError::TraceCorrupt { line: i + 1, reason: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Per-instance result summary; the payload of `instance_result` records
/// and the rows of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub instance_id: String,
    pub final_answer: Option<AnswerLabel>,
    pub correct: Option<bool>,
    pub abstained: bool,
    pub winner: Option<CandidateTag>,
    pub scores: BTreeMap<String, i32>,
    pub chat_calls: u64,
    pub embed_calls: u64,
    pub wall_ms: u64,
    pub stage_ms: BTreeMap<String, u64>,
}

/// The summaries of every completed instance in a trace, keyed by id.
/// A later record for the same id wins.
pub fn completed_summaries(records: &[TraceRecord]) -> BTreeMap<String, InstanceSummary> {
    let mut done = BTreeMap::new();
    for record in records {
        if record.event_type == EVENT_INSTANCE_RESULT {
            if let Ok(summary) = serde_json::from_value::<InstanceSummary>(record.payload.clone()) {
                done.insert(summary.instance_id.clone(), summary);
            }
        }
    }
    done
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecialtyPayload {
    pub ranked_fields: [String; 3],
    pub chosen_rank: u8,
    pub chosen: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalPayload {
    pub stage: String,
    pub set: RetrievalSet,
    /// Present for stage-1 and stage-2 events: the embedded query at
    /// full float precision.
    pub query_embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatCallPayload {
    pub label: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub completion: String,
    pub prompt_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorePayload {
    pub tag: CandidateTag,
    pub value: i32,
    pub repeats: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationPayload {
    pub winner: CandidateTag,
    pub final_answer: AnswerLabel,
    pub tie_broken: bool,
    pub tied_members: Vec<CandidateTag>,
}
