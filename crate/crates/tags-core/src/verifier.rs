//! Reliability scoring and final-answer aggregation.
//!
//! A zero-shot reviewer role scores how well each candidate's rationale
//! supports its answer on the 1-5 scale; degenerate candidates are
//! assigned 0 without a backend call. The final answer is the
//! highest-scored candidate's, with ties resolved deterministically in
//! the order specialist round 2, generalist round 2, specialist round 1,
//! generalist round 1.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    prompts, AgentId, CandidatePair, CandidateSet, CandidateTag, ChatBackend, ChatError,
    ChatMessage, GenerationParams,
};
use crate::corpus::{AnswerLabel, OptionList};

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("could not parse an in-scale score from: {raw:?}")]
    UnparseableScore { raw: String },
    #[error("every candidate is degenerate; no answer can be selected")]
    AbstainAllDegenerate,
    #[error("scores cover tags {got:?} but candidates carry tags {expected:?}")]
    ScoreSetMismatch { got: Vec<String>, expected: Vec<String> },
    #[error("winner {0} has no parsed answer")]
    DegenerateWinner(String),
    #[error(transparent)]
    Chat(#[from] ChatError),
}

/// The live scoring scale.
pub const SCALE_MIN: i32 = 1;
pub const SCALE_MAX: i32 = 5;

/// An integer consistency score. Live scores sit in 1..=5; the value 0
/// is reserved for degenerate candidates and is never requested from a
/// backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReliabilityScore {
    pub value: i32,
    pub scale_min: i32,
    pub scale_max: i32,
}

impl ReliabilityScore {
    pub fn live(value: i32) -> Result<Self, VerifierError> {
        if (SCALE_MIN..=SCALE_MAX).contains(&value) {
            Ok(Self { value, scale_min: SCALE_MIN, scale_max: SCALE_MAX })
        } else {
            Err(VerifierError::UnparseableScore { raw: value.to_string() })
        }
    }

    pub fn degenerate() -> Self {
        Self { value: 0, scale_min: SCALE_MIN, scale_max: SCALE_MAX }
    }

    pub fn is_degenerate(self) -> bool {
        self.value == 0
    }
}

/// Extract the integer after the last `Score:` marker. Decoration like
/// brackets or asterisks is skipped; a range pattern such as `1-5`
/// (the format hint echoed back) does not parse.
fn parse_score_value(raw: &str) -> Option<i64> {
    let pos = raw.rfind("Score:")?;
    let after = raw[pos + "Score:".len()..]
        .trim_start_matches(|c: char| c.is_whitespace() || "([{*\"'`".contains(c));
    let mut chars = after.char_indices().peekable();
    let mut end = 0;
    let mut digits = String::new();
    if let Some((_, '-')) = chars.peek() {
        digits.push('-');
        chars.next();
        end = 1;
    }
    for (i, c) in chars {
        if c.is_ascii_digit() {
            digits.push(c);
            end = i + 1;
        } else {
            break;
        }
    }
    if digits.is_empty() || digits == "-" {
        return None;
    }
    let tail = &after[end..];
    if tail.starts_with('-') && tail[1..].starts_with(|c: char| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Score one candidate's rationale/answer consistency. Degenerate
/// candidates score 0 with zero backend calls. Out-of-scale integers
/// count as parse failures: the call is re-asked with a format reminder
/// and `UnparseableScore` surfaces once the retry budget is exhausted.
pub fn score_candidate(
    backend: &dyn ChatBackend,
    question: &str,
    options: &OptionList,
    candidate: &CandidatePair,
    params: &GenerationParams,
) -> Result<ReliabilityScore, VerifierError> {
    score_candidate_repeated(backend, question, options, candidate, params, 1)
}

/// Like [`score_candidate`] but averaging `repeats` independent scoring
/// calls (mean, rounded half up). The default pipeline uses one call per
/// candidate.
pub fn score_candidate_repeated(
    backend: &dyn ChatBackend,
    question: &str,
    options: &OptionList,
    candidate: &CandidatePair,
    params: &GenerationParams,
    repeats: u32,
) -> Result<ReliabilityScore, VerifierError> {
    if candidate.is_degenerate() {
        return Ok(ReliabilityScore::degenerate());
    }
    let answer = candidate.answer.expect("non-degenerate candidate has an answer");
    let answer_line = format!(
        "{answer}. {}",
        options.text_for(answer).expect("candidate answers are validated against options")
    );
    let base = vec![ChatMessage::system(prompts::scorer_system(
        question,
        options,
        &candidate.rationale,
        &answer_line,
    ))];
    let repeats = repeats.max(1);
    let mut total = 0i64;
    for _ in 0..repeats {
        let mut messages = base.clone();
        let mut last_raw = String::new();
        let mut value = None;
        for _ in 0..=params.retry_limit {
            let raw = backend.send(&messages, params)?;
            match parse_score_value(&raw) {
                Some(v) if (SCALE_MIN as i64..=SCALE_MAX as i64).contains(&v) => {
                    value = Some(v);
                    break;
                }
                _ => {
                    last_raw = raw;
                    messages.push(ChatMessage::user(prompts::SCORE_FORMAT_REMINDER));
                }
            }
        }
        total += value.ok_or(VerifierError::UnparseableScore { raw: last_raw })?;
    }
    let mean = total as f64 / repeats as f64;
    ReliabilityScore::live(mean.round() as i32)
}

/// Tie-break priority: lower keys win. Round 2 beats round 1, specialists
/// beat the generalist within a round, and lower specialist slots beat
/// higher ones.
fn priority_key(tag: CandidateTag) -> (u8, u8, u8) {
    let round = 2 - tag.round.number();
    match tag.agent {
        AgentId::Specialist(slot) => (round, 0, slot),
        AgentId::Generalist => (round, 1, 0),
    }
}

/// The outcome of aggregation: the selected answer, which candidate won,
/// every score, and how any tie was resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationResult {
    pub final_answer: AnswerLabel,
    pub winner: CandidateTag,
    pub scores: BTreeMap<CandidateTag, ReliabilityScore>,
    pub tie_broken: bool,
    pub tied_members: Vec<CandidateTag>,
}

/// Select the highest-scored candidate's answer. With equal top scores
/// the fixed priority picks the winner; when every score is 0 (all
/// candidates degenerate) aggregation abstains.
pub fn aggregate(
    candidates: &CandidateSet,
    scores: &BTreeMap<CandidateTag, ReliabilityScore>,
) -> Result<AggregationResult, VerifierError> {
    let expected: Vec<CandidateTag> = candidates.iter().map(|c| c.tag).collect();
    if scores.len() != expected.len() || expected.iter().any(|t| !scores.contains_key(t)) {
        return Err(VerifierError::ScoreSetMismatch {
            got: scores.keys().map(|t| t.to_string()).collect(),
            expected: expected.iter().map(|t| t.to_string()).collect(),
        });
    }
    let max = scores.values().map(|s| s.value).max().expect("non-empty candidate set");
    if max == 0 {
        return Err(VerifierError::AbstainAllDegenerate);
    }
    let tied_members: Vec<CandidateTag> =
        expected.iter().copied().filter(|t| scores[t].value == max).collect();
    let winner = tied_members
        .iter()
        .copied()
        .min_by_key(|t| priority_key(*t))
        .expect("argmax set is non-empty");
    let winning = candidates.get(winner).expect("winner comes from the candidate set");
    let final_answer = winning
        .answer
        .ok_or_else(|| VerifierError::DegenerateWinner(winner.to_string()))?;
    Ok(AggregationResult {
        final_answer,
        winner,
        scores: scores.clone(),
        tie_broken: tied_members.len() > 1,
        tied_members,
    })
}
