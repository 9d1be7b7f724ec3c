//! Generalist/specialist reasoning: chat backends, the prompt catalog,
//! specialty inference, output parsing, and the two reasoning rounds
//! that produce the four-candidate set.
//!
//! Agents never see each other's outputs; the rounds communicate only
//! through retrieval. A parse failure that survives the re-ask budget
//! produces a degenerate candidate (no answer) rather than aborting, so
//! a benchmark run cannot crash on one malformed completion.

mod backend;
pub mod mock;
pub mod prompts;

pub use backend::{
    prompt_digest, ChatBackend, ChatError, ChatMessage, GenerationParams, HttpBackendConfig,
    HttpChatBackend, Role,
};
pub use mock::{MockCall, MockChatBackend, MockRule, MockScript};

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{AnswerLabel, CorpusEntry, OptionList};
use prompts::{AgentPromptOptions, ExemplarBlock, ExemplarBody};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("could not parse a specialty classification from: {raw:?}")]
    UnparseableSpecialty { raw: String },
    #[error("invalid specialty rank {0}; expected 1, 2 or 3")]
    InvalidSpecialtyRank(u8),
    #[error("completion contains no answer marker: {raw:?}")]
    NoAnswerFound { raw: String },
    #[error("answer letter {letter} is not among the options")]
    AnswerOutOfRange { letter: char },
    #[error("duplicate candidate tag {0}")]
    DuplicateTag(String),
    #[error("candidate at position {position} carries tag {got}, expected {expected}")]
    MisplacedCandidate { position: usize, got: String, expected: String },
    #[error(transparent)]
    Chat(#[from] ChatError),
}

/// Which prompted role produced a candidate. Extra specialists (the
/// specialist-count knob) occupy slots 1 and up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AgentId {
    Generalist,
    Specialist(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Round {
    One,
    Two,
}

impl Round {
    pub fn number(self) -> u8 {
        match self {
            Round::One => 1,
            Round::Two => 2,
        }
    }
}

/// The (agent, round) identity of one candidate. Displays as `G1`, `S1`,
/// `G2`, `S2`, with `x<n>` suffixes for extra specialist slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CandidateTag {
    pub round: Round,
    pub agent: AgentId,
}

impl CandidateTag {
    pub fn generalist(round: Round) -> Self {
        Self { agent: AgentId::Generalist, round }
    }

    pub fn specialist(round: Round) -> Self {
        Self { agent: AgentId::Specialist(0), round }
    }

    pub fn specialist_slot(round: Round, slot: u8) -> Self {
        Self { agent: AgentId::Specialist(slot), round }
    }
}

impl fmt::Display for CandidateTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agent {
            AgentId::Generalist => write!(f, "G{}", self.round.number()),
            AgentId::Specialist(0) => write!(f, "S{}", self.round.number()),
            AgentId::Specialist(slot) => write!(f, "S{}x{}", self.round.number(), slot + 1),
        }
    }
}

impl FromStr for CandidateTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("invalid candidate tag {s:?}");
        let mut chars = s.chars();
        let agent_char = chars.next().ok_or_else(err)?;
        let round = match chars.next().ok_or_else(err)? {
            '1' => Round::One,
            '2' => Round::Two,
            _ => return Err(err()),
        };
        let rest: String = chars.collect();
        let agent = match (agent_char, rest.as_str()) {
            ('G', "") => AgentId::Generalist,
            ('S', "") => AgentId::Specialist(0),
            ('S', suffix) => {
                let n: u8 = suffix.strip_prefix('x').and_then(|d| d.parse().ok()).ok_or_else(err)?;
                if n < 2 {
                    return Err(err());
                }
                AgentId::Specialist(n - 1)
            }
            _ => return Err(err()),
        };
        Ok(Self { agent, round })
    }
}

impl Serialize for CandidateTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for CandidateTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// The classifier's three ranked medical fields plus which rank the run
/// is configured to use (rank 3 reproduces the misassigned-specialist
/// ablation).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialtyLabel {
    pub ranked_fields: [String; 3],
    pub chosen_rank: u8,
}

impl SpecialtyLabel {
    pub fn new(ranked_fields: [String; 3], chosen_rank: u8) -> Result<Self, AgentError> {
        if !(1..=3).contains(&chosen_rank) {
            return Err(AgentError::InvalidSpecialtyRank(chosen_rank));
        }
        Ok(Self { ranked_fields, chosen_rank })
    }

    /// The field the configured rank selects.
    pub fn chosen(&self) -> &str {
        &self.ranked_fields[(self.chosen_rank - 1) as usize]
    }

    /// Field for a specialist slot: slot 0 takes the chosen rank and
    /// further slots walk down the ranking, wrapping after the third.
    pub fn field_for_slot(&self, slot: u8) -> &str {
        let idx = (self.chosen_rank as usize - 1 + slot as usize) % 3;
        &self.ranked_fields[idx]
    }
}

/// One (rationale, answer) candidate. `answer` is `None` for degenerate
/// candidates whose completion never parsed; they score zero and can
/// only be selected when every candidate is degenerate, which aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub tag: CandidateTag,
    pub rationale: String,
    pub answer: Option<AnswerLabel>,
    pub raw_completion: String,
    pub prompt_digest: String,
}

impl CandidatePair {
    pub fn is_degenerate(&self) -> bool {
        self.answer.is_none()
    }
}

/// The ordered candidate set handed to aggregation: `[G1, S1.., G2,
/// S2..]` with all tags distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    candidates: Vec<CandidatePair>,
}

impl CandidateSet {
    pub fn from_rounds(
        g1: CandidatePair,
        s1: Vec<CandidatePair>,
        g2: CandidatePair,
        s2: Vec<CandidatePair>,
    ) -> Result<Self, AgentError> {
        let specialists = s1.len();
        let mut candidates = vec![g1];
        candidates.extend(s1);
        candidates.push(g2);
        candidates.extend(s2);
        let mut expected = vec![CandidateTag::generalist(Round::One)];
        expected.extend((0..specialists).map(|s| CandidateTag::specialist_slot(Round::One, s as u8)));
        expected.push(CandidateTag::generalist(Round::Two));
        expected.extend((0..specialists).map(|s| CandidateTag::specialist_slot(Round::Two, s as u8)));
        if candidates.len() != expected.len() {
            return Err(AgentError::MisplacedCandidate {
                position: expected.len().min(candidates.len()),
                got: "(missing)".into(),
                expected: "equal specialist counts per round".into(),
            });
        }
        for (position, (candidate, want)) in candidates.iter().zip(&expected).enumerate() {
            if candidate.tag != *want {
                return Err(AgentError::MisplacedCandidate {
                    position,
                    got: candidate.tag.to_string(),
                    expected: want.to_string(),
                });
            }
        }
        let mut seen = std::collections::HashSet::new();
        for candidate in &candidates {
            if !seen.insert(candidate.tag) {
                return Err(AgentError::DuplicateTag(candidate.tag.to_string()));
            }
        }
        Ok(Self { candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CandidatePair> {
        self.candidates.iter()
    }

    pub fn get(&self, tag: CandidateTag) -> Option<&CandidatePair> {
        self.candidates.iter().find(|c| c.tag == tag)
    }
}

/// Gather the four candidates of a default (single-specialist) pass in
/// the fixed order `[g1, s1, g2, s2]`.
pub fn assemble_candidates(
    g1: CandidatePair,
    s1: CandidatePair,
    g2: CandidatePair,
    s2: CandidatePair,
) -> Result<CandidateSet, AgentError> {
    CandidateSet::from_rounds(g1, vec![s1], g2, vec![s2])
}

fn parse_specialty_fields(raw: &str) -> Option<[String; 3]> {
    let line = raw
        .lines()
        .rev()
        .map(str::trim_start)
        .find(|l| l.starts_with("Medical Field:"))?;
    let rest = &line["Medical Field:".len()..];
    let fields: Vec<&str> = rest.split('|').map(str::trim).collect();
    if fields.len() == 3 && fields.iter().all(|f| !f.is_empty()) {
        Some([fields[0].to_string(), fields[1].to_string(), fields[2].to_string()])
    } else {
        None
    }
}

/// Ask the backend which medical fields the question belongs to. The
/// completion must contain a line `Medical Field: a | b | c`; each
/// failed parse triggers a re-ask with a format reminder, up to the
/// retry limit.
pub fn classify_specialty(
    backend: &dyn ChatBackend,
    question: &str,
    options: &OptionList,
    params: &GenerationParams,
    chosen_rank: u8,
) -> Result<SpecialtyLabel, AgentError> {
    let mut messages = vec![
        ChatMessage::system(prompts::SPECIALTY_SYSTEM),
        ChatMessage::user(prompts::specialty_user(question, options)),
    ];
    let mut last_raw = String::new();
    for _ in 0..=params.retry_limit {
        let raw = backend.send(&messages, params)?;
        if let Some(fields) = parse_specialty_fields(&raw) {
            return SpecialtyLabel::new(fields, chosen_rank);
        }
        last_raw = raw;
        messages.push(ChatMessage::user(prompts::SPECIALTY_REMINDER));
    }
    Err(AgentError::UnparseableSpecialty { raw: last_raw })
}

/// The prompted role of one reasoning call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PromptRole {
    Generalist,
    Specialist(String),
}

impl PromptRole {
    fn system(&self) -> String {
        match self {
            PromptRole::Generalist => prompts::GENERALIST_SYSTEM.to_string(),
            PromptRole::Specialist(domain) => prompts::specialist_system(domain),
        }
    }
}

fn exemplar_blocks<'a>(exemplars: &'a [&'a CorpusEntry]) -> Vec<ExemplarBlock<'a>> {
    exemplars
        .iter()
        .map(|e| ExemplarBlock {
            question: &e.question,
            options: &e.options,
            body: ExemplarBody::Thought(&e.rationale),
        })
        .collect()
}

/// Render the full message list for a reasoning call: the role's system
/// prompt plus the few-shot user prompt with the exemplars in
/// retrieval-rank order.
pub fn render_agent_prompt(
    role: &PromptRole,
    question: &str,
    options: &OptionList,
    exemplars: &[&CorpusEntry],
) -> Vec<ChatMessage> {
    render_agent_prompt_with(
        role,
        question,
        options,
        &exemplar_blocks(exemplars),
        AgentPromptOptions::default(),
    )
}

pub(crate) fn render_agent_prompt_with(
    role: &PromptRole,
    question: &str,
    options: &OptionList,
    blocks: &[ExemplarBlock<'_>],
    opts: AgentPromptOptions<'_>,
) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(role.system()),
        ChatMessage::user(prompts::agent_user(question, options, blocks, opts)),
    ]
}

/// Split a completion into (rationale, answer).
///
/// The rationale is the text after the last `Thought:` marker up to the
/// following `Answer:` marker, trimmed; without a `Thought:` marker it
/// is everything before the final `Answer:` marker (the answer line is
/// never part of the rationale, since stage-2 retrieval embeds it). The
/// answer is the first single-letter token after the last `Answer:`
/// marker, so decorations like `(C)`, `**C**` or `Option C.` all parse.
pub fn parse_agent_output(
    raw: &str,
    options: &OptionList,
) -> Result<(String, AnswerLabel), AgentError> {
    let answer_pos =
        raw.rfind("Answer:").ok_or_else(|| AgentError::NoAnswerFound { raw: raw.to_string() })?;
    let after = &raw[answer_pos + "Answer:".len()..];
    let mut answer = None;
    for token in after.split(|c: char| !c.is_ascii_alphanumeric()).filter(|t| !t.is_empty()) {
        if token.len() == 1 {
            let ch = token.chars().next().expect("single char token");
            if ch.is_ascii_alphabetic() {
                answer = Some(ch.to_ascii_uppercase());
                break;
            }
        }
    }
    let letter = answer.ok_or_else(|| AgentError::NoAnswerFound { raw: raw.to_string() })?;
    let label = AnswerLabel::new(letter).expect("ascii uppercase letter");
    if !options.contains(label) {
        return Err(AgentError::AnswerOutOfRange { letter });
    }

    let rationale = match raw.rfind("Thought:") {
        Some(pos) => {
            let body = &raw[pos + "Thought:".len()..];
            match body.find("Answer:") {
                Some(end) => body[..end].trim(),
                None => body.trim(),
            }
        }
        None => raw[..answer_pos].trim(),
    };
    // An answer with no visible reasoning still needs a non-empty
    // rationale for scoring and stage-2 retrieval; fall back to the
    // whole completion.
    let rationale = if rationale.is_empty() { raw.trim() } else { rationale };
    Ok((rationale.to_string(), label))
}

/// Run one reasoning call: render, send, parse, re-ask on parse failure,
/// and fall back to a degenerate candidate when the re-ask budget is
/// exhausted. Backend transport errors propagate.
#[allow(clippy::too_many_arguments)]
pub fn agent_candidate(
    backend: &dyn ChatBackend,
    role: &PromptRole,
    tag: CandidateTag,
    question: &str,
    options: &OptionList,
    blocks: &[ExemplarBlock<'_>],
    opts: AgentPromptOptions<'_>,
    params: &GenerationParams,
) -> Result<CandidatePair, AgentError> {
    let mut messages = render_agent_prompt_with(role, question, options, blocks, opts);
    let digest = prompt_digest(&messages);
    let mut last_raw = String::new();
    for _ in 0..=params.retry_limit {
        let raw = backend.send(&messages, params)?;
        match parse_agent_output(&raw, options) {
            Ok((rationale, answer)) => {
                return Ok(CandidatePair {
                    tag,
                    rationale,
                    answer: Some(answer),
                    raw_completion: raw,
                    prompt_digest: digest,
                });
            }
            Err(_) => {
                last_raw = raw;
                messages.push(ChatMessage::user(prompts::ANSWER_FORMAT_REMINDER));
            }
        }
    }
    log::warn!("candidate {tag} degenerate after {} re-asks", params.retry_limit);
    Ok(CandidatePair {
        tag,
        rationale: last_raw.trim().to_string(),
        answer: None,
        raw_completion: last_raw,
        prompt_digest: digest,
    })
}

/// Round 1: both agents see the same semantically retrieved exemplars;
/// the specialist additionally carries the inferred specialty.
pub fn round1(
    backend: &dyn ChatBackend,
    question: &str,
    options: &OptionList,
    exemplars: &[&CorpusEntry],
    specialty: &SpecialtyLabel,
    params: &GenerationParams,
) -> Result<(CandidatePair, CandidatePair), AgentError> {
    let blocks = exemplar_blocks(exemplars);
    let g1 = agent_candidate(
        backend,
        &PromptRole::Generalist,
        CandidateTag::generalist(Round::One),
        question,
        options,
        &blocks,
        AgentPromptOptions::default(),
        params,
    )?;
    let s1 = agent_candidate(
        backend,
        &PromptRole::Specialist(specialty.chosen().to_string()),
        CandidateTag::specialist(Round::One),
        question,
        options,
        &blocks,
        AgentPromptOptions::default(),
        params,
    )?;
    Ok((g1, s1))
}

/// Round 2: each agent sees its own rationale-aligned exemplars. Round-1
/// text is not included unless `carry` supplies it (the carryover knob).
#[allow(clippy::too_many_arguments)]
pub fn round2(
    backend: &dyn ChatBackend,
    question: &str,
    options: &OptionList,
    generalist_exemplars: &[&CorpusEntry],
    specialist_exemplars: &[&CorpusEntry],
    specialty: &SpecialtyLabel,
    params: &GenerationParams,
    carry: Option<(&str, &str)>,
) -> Result<(CandidatePair, CandidatePair), AgentError> {
    let g_blocks = exemplar_blocks(generalist_exemplars);
    let s_blocks = exemplar_blocks(specialist_exemplars);
    let (g_prior, s_prior) = match carry {
        Some((g, s)) => (Some(g), Some(s)),
        None => (None, None),
    };
    let g2 = agent_candidate(
        backend,
        &PromptRole::Generalist,
        CandidateTag::generalist(Round::Two),
        question,
        options,
        &g_blocks,
        AgentPromptOptions { cot_instruction: false, prior_rationale: g_prior },
        params,
    )?;
    let s2 = agent_candidate(
        backend,
        &PromptRole::Specialist(specialty.chosen().to_string()),
        CandidateTag::specialist(Round::Two),
        question,
        options,
        &s_blocks,
        AgentPromptOptions { cot_instruction: false, prior_rationale: s_prior },
        params,
    )?;
    Ok((g2, s2))
}
