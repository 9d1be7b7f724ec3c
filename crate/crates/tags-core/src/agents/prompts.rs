//! The prompt catalog. Every template the pipeline sends is rendered
//! here, byte-deterministically, so traces reproduce and snapshot tests
//! can pin exact output.

use std::fmt::Write as _;

use crate::corpus::{AnswerLabel, OptionList};

/// System prompt for the generalist reasoning agent.
pub const GENERALIST_SYSTEM: &str = "You are a general practitioner trained to manage a wide range of clinical conditions. Your task is to evaluate clinical multiple-choice questions using broad, cross-disciplinary medical knowledge. Focus on extracting key clinical findings, ruling out unlikely diagnoses, and applying general reasoning principles.\n\nFirst, analyze the reference examples to understand their diagnostic thought process.\nThen, produce a step-by-step analysis for the new question.\n\nRequired output format\nThought: [your detailed step-by-step reasoning]\nAnswer: [one of A, B, C, \u{2026}]";

/// System prompt for the specialty-classification call.
pub const SPECIALTY_SYSTEM: &str = "You are a senior medical expert tasked with classifying clinical multiple-choice problems into the most relevant areas of medical science.\n\nYour role is strictly to determine and output the classification.\n\nImportant: Do not provide any explanation, reasoning, or commentary. Only output the final classification strictly following the format.";

/// The line the specialty classifier must emit.
pub const SPECIALTY_FORMAT_LINE: &str = "Medical Field: Field1 | Field2 | Field3";

pub const SPECIALTY_REMINDER: &str =
    "Reminder: output only one line in the exact format \"Medical Field: Field1 | Field2 | Field3\".";

pub const ANSWER_FORMAT_REMINDER: &str = "Reminder: end your response with the exact lines \"Thought: [your reasoning]\" and \"Answer: [letter]\" where the letter is one of the listed options.";

pub const SCORE_FORMAT_REMINDER: &str =
    "Reminder: output only \"Score: N\" where N is an integer from 1 to 5.";

/// System prompt for the specialist reasoning agent, with the inferred
/// medical field substituted in.
pub fn specialist_system(domain: &str) -> String {
    format!(
        "You are an experienced specialist in {domain}. Your role is to carefully analyze clinical multiple-choice questions from the standpoint of a {lower} expert. You should reason by focusing on the interpretation of symptoms, underlying pathophysiology, and domain-specific diagnostic principles.\n\nFirst, review the provided reference examples and understand their reasoning patterns.\nThen, based on your specialist knowledge, perform structured, step-by-step reasoning for the new question.\n\nRequired output format\nThought: [your detailed step-by-step reasoning]\nAnswer: [one of A, B, C, \u{2026}]",
        lower = domain.to_lowercase()
    )
}

/// User prompt for the specialty-classification call.
pub fn specialty_user(question: &str, options: &OptionList) -> String {
    format!(
        "Task Instructions:\n- Carefully analyze the following medical question:\n'''{question}'''\n- The corresponding options are:\n'''{options}'''\n- Based on both the question and the options, determine the top 3 most relevant subfields of medicine that are required to solve this question.\n- You must only output in the exact format:\n{SPECIALTY_FORMAT_LINE}",
        options = options.render_lines()
    )
}

/// What a reference-example block shows below its question and options:
/// a worked reasoning trace for corpus exemplars, or just the answer
/// line for train-split demonstrations.
#[derive(Debug, Clone)]
pub enum ExemplarBody<'a> {
    Thought(&'a str),
    Answer(AnswerLabel),
}

/// One reference example as it appears in a few-shot prompt.
#[derive(Debug, Clone)]
pub struct ExemplarBlock<'a> {
    pub question: &'a str,
    pub options: &'a OptionList,
    pub body: ExemplarBody<'a>,
}

/// Optional extra sections of the reasoning prompt.
#[derive(Debug, Clone, Copy, Default)]
pub struct AgentPromptOptions<'a> {
    /// Adds an explicit step-by-step instruction (the chain-of-thought
    /// baseline mode).
    pub cot_instruction: bool,
    /// The agent's own earlier rationale, included only when the
    /// round-1-carryover knob is on.
    pub prior_rationale: Option<&'a str>,
}

/// User prompt for a reasoning call: header, constraints, numbered
/// reference examples in retrieval-rank order, then the target question
/// and the required output-format lines. Byte-deterministic in its
/// inputs.
pub fn agent_user(
    question: &str,
    options: &OptionList,
    exemplars: &[ExemplarBlock<'_>],
    opts: AgentPromptOptions<'_>,
) -> String {
    let mut out = String::new();
    out.push_str("Your task is to solve the following clinical multiple-choice question.\n\n");
    if !exemplars.is_empty() {
        if exemplars.len() == 1 {
            out.push_str("Below is 1 solved reference example. ");
        } else {
            let _ = write!(out, "Below are {} solved reference examples. ", exemplars.len());
        }
        out.push_str(
            "Each example shows its question, its options, and a worked reasoning trace. Focus only on learning the reasoning patterns. For the new question, generate your own reasoning and answer.\n\n",
        );
    }
    out.push_str("Constraints:\n- Always choose one of the provided options\u{2014}never \"unknown\".\n- Follow the exact output format shown below.\n\n");
    for (i, exemplar) in exemplars.iter().enumerate() {
        let _ = write!(
            out,
            "Reference Example {}:\n{}\n{}\n",
            i + 1,
            exemplar.question,
            exemplar.options.render_lines()
        );
        match &exemplar.body {
            ExemplarBody::Thought(rationale) => {
                let _ = write!(out, "Thought: {rationale}\n\n");
            }
            ExemplarBody::Answer(label) => {
                let _ = write!(out, "Answer: {label}\n\n");
            }
        }
    }
    if opts.cot_instruction {
        out.push_str("Think through the problem step by step before selecting your final answer.\n\n");
    }
    if let Some(prior) = opts.prior_rationale {
        let _ = write!(out, "Your earlier reasoning for this question:\nThought: {prior}\n\n");
    }
    let _ = write!(out, "New Question:\n{question}\n{}\n\n", options.render_lines());
    let _ = write!(
        out,
        "Required output format\nThought: [your detailed step-by-step reasoning]\nAnswer: [one of {}]",
        options.letters_joined()
    );
    out
}

/// The reliability-scoring prompt, rendered as a single system message:
/// the question, options, candidate reasoning and answer, the reviewer
/// role, the 1-5 rubric, and the output format line.
pub fn scorer_system(question: &str, options: &OptionList, thought: &str, answer_line: &str) -> String {
    format!(
        "A clinical AI agent has answered the following multiple-choice question:\n\n\
         Question:\n\"{question}\"\n\n\
         Options:\n\"{options}\"\n\n\
         The agent provided the following reasoning:\nThought:\n\"{thought}\"\n\n\
         Final Answer:\n\"{answer_line}\"\n\n\
         Your Role:\nYou are a critical-thinking medical reviewer. Your task is to assign a reliability score from 1 to 5 based on how well the reasoning supports the answer.\n\n\
         Scoring Scale:\n\
         - 5 \u{2014} Reasoning is complete, medically accurate, and fully supports the answer.\n\
         - 4 \u{2014} Mostly correct with minor issues, but the answer is still justified.\n\
         - 3 \u{2014} Reasoning has some issues or omissions, but partially supports the answer.\n\
         - 2 \u{2014} Reasoning is flawed or incomplete; answer is weakly supported.\n\
         - 1 \u{2014} Reasoning is incorrect or misleading; answer is not justified.\n\n\
         Output Format:\nScore: [1-5]",
        options = options.render_lines()
    )
}
