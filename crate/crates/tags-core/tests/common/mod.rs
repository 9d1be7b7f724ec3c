//! Shared fixtures for integration tests: a small corpus, datasets with
//! marker words, scripted mock backends, and trace normalization.

#![allow(dead_code)]

use tags_core::corpus::{AnswerLabel, Corpus, CorpusEntry, EvalInstance, OptionList};
use tags_core::embedding::{build_index, BuildOptions, DeterministicProvider, EmbeddingIndex};
use tags_core::agents::MockScript;

pub const SPECIALTY_COMPLETION: &str = "Medical Field: Cardiology | Neurology | Genetics";

pub fn options4() -> OptionList {
    OptionList::new(vec![
        "first choice".into(),
        "second choice".into(),
        "third choice".into(),
        "fourth choice".into(),
    ])
    .unwrap()
}

pub fn fixture_corpus(n: usize) -> Corpus {
    let entries = (0..n)
        .map(|i| CorpusEntry {
            id: format!("c{i}"),
            question: format!("Corpus question {i} about condition number {i}?"),
            options: options4(),
            answer: AnswerLabel::from_index(i % 4).unwrap(),
            rationale: format!("Worked reasoning trail {i}: the finding points to choice {i}."),
        })
        .collect();
    Corpus::new(entries, "fixture").unwrap()
}

pub fn fixture_dataset(n: usize) -> Vec<EvalInstance> {
    (0..n)
        .map(|i| EvalInstance {
            id: format!("q{i}"),
            question: format!("Benchmark question {i} with marker word mk{i}?"),
            options: options4(),
            gold: AnswerLabel::new('A').unwrap(),
        })
        .collect()
}

pub fn fixture_index(corpus: &Corpus, provider: &DeterministicProvider) -> EmbeddingIndex {
    let (index, _) = build_index(corpus, provider, &BuildOptions::default()).unwrap();
    index
}

/// The standard pipeline script: a specialty line for classification
/// calls, a constant score for reviewer calls, and a well-formed agent
/// completion for everything else. Role-specific needles keep the
/// generalist and specialist rationales distinct so the embed-call
/// budget is exercised cold.
pub fn tags_script() -> MockScript {
    MockScript::new()
        .rule_contains(&["classifying clinical multiple-choice problems"], SPECIALTY_COMPLETION)
        .rule_contains(&["critical-thinking medical reviewer"], "Score: 3")
        .rule_contains(
            &["You are a general practitioner"],
            "Thought: generalist reasoning over the findings.\nAnswer: A",
        )
        .with_default("Thought: specialist reasoning over the findings.\nAnswer: A")
}

/// A script whose agent answers vary per question marker word. Used to
/// construct runs with a known number of correct finals.
pub fn answers_script(answers: &[(&str, char)]) -> MockScript {
    let mut script = MockScript::new()
        .rule_contains(&["classifying clinical multiple-choice problems"], SPECIALTY_COMPLETION)
        .rule_contains(&["critical-thinking medical reviewer"], "Score: 3");
    for (marker, letter) in answers {
        script = script.rule_contains(
            &[marker],
            format!("Thought: reasoning about {marker}.\nAnswer: {letter}"),
        );
    }
    script.with_default("Thought: default reasoning.\nAnswer: A")
}

/// Render a trace file with every timing field removed, for
/// determinism comparisons. `strip_embed_counts` additionally drops the
/// embed-call counters, whose cache-miss attribution is
/// scheduling-dependent at pool widths above one.
pub fn normalized_trace_with(path: &std::path::Path, strip_embed_counts: bool) -> String {
    fn strip(value: &mut serde_json::Value, strip_embed_counts: bool) {
        match value {
            serde_json::Value::Object(map) => {
                map.remove("ts_ms");
                map.remove("wall_ms");
                map.remove("stage_ms");
                if strip_embed_counts {
                    map.remove("embed_calls");
                }
                for v in map.values_mut() {
                    strip(v, strip_embed_counts);
                }
            }
            serde_json::Value::Array(items) => {
                items.iter_mut().for_each(|v| strip(v, strip_embed_counts))
            }
            _ => {}
        }
    }
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            strip(&mut v, strip_embed_counts);
            serde_json::to_string(&v).unwrap()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Timing-stripped trace rendering (the determinism comparison for
/// sequential runs).
pub fn normalized_trace(path: &std::path::Path) -> String {
    normalized_trace_with(path, false)
}
