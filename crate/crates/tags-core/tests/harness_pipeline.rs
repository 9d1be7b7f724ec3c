//! End-to-end pipeline behavior under scripted backends: call budgets,
//! mode isolation, resumability, abstention, and the leakage guard.

mod common;

use std::collections::HashSet;

use common::*;
use tags_core::agents::{MockChatBackend, MockScript};
use tags_core::corpus::EvalInstance;
use tags_core::embedding::DeterministicProvider;
use tags_core::harness::{
    run_eval, run_instance, EmbedCache, InstanceInput, Mode, PipelineConfig, PipelineDeps,
};

fn deps<'a>(
    backend: &'a MockChatBackend,
    provider: &'a DeterministicProvider,
    index: &'a tags_core::embedding::EmbeddingIndex,
    corpus: &'a tags_core::corpus::Corpus,
    cache: &'a EmbedCache,
) -> PipelineDeps<'a> {
    PipelineDeps {
        backend,
        verifier_backend: None,
        provider: Some(provider),
        index: Some(index),
        corpus: Some(corpus),
        fewshot_pool: None,
        embed_cache: Some(cache),
    }
}

fn bare_deps(backend: &MockChatBackend) -> PipelineDeps<'_> {
    PipelineDeps {
        backend,
        verifier_backend: None,
        provider: None,
        index: None,
        corpus: None,
        fewshot_pool: None,
        embed_cache: None,
    }
}

#[test]
fn tags_mode_issues_nine_chat_and_three_embed_calls() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig::default();
    let (result, events) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    assert_eq!(result.chat_calls, 9, "1 specialty + 2 round-1 + 2 round-2 + 4 scoring");
    assert_eq!(result.embed_calls, 3, "1 query + 2 distinct rationales");
    assert_eq!(result.correct, Some(true));
    assert_eq!(result.winner.map(|w| w.to_string()), Some("S2".into()));
    assert_eq!(events.last().unwrap().event_type, "instance_result");
    // 9 chat events + 3 retrieval events + specialty + scores + aggregation.
    let chat_events = events.iter().filter(|e| e.event_type == "chat_call").count();
    assert_eq!(chat_events, 9);
}

#[test]
fn warm_cache_reduces_embed_calls() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig::default();
    let d = deps(&backend, &provider, &index, &corpus, &cache);
    let (first, _) = run_instance(&InstanceInput::from(&dataset[0]), &cfg, &d).unwrap();
    assert_eq!(first.embed_calls, 3);
    // Same question again: every text is cached.
    let (second, _) = run_instance(&InstanceInput::from(&dataset[0]), &cfg, &d).unwrap();
    assert_eq!(second.embed_calls, 0);
}

#[test]
fn zero_shot_is_one_call_no_embeddings() {
    let backend = MockChatBackend::new(
        MockScript::new().with_default("Thought: direct.\nAnswer: A"),
    );
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { mode: Mode::ZeroShot, ..PipelineConfig::default() };
    let (result, _) =
        run_instance(&InstanceInput::from(&dataset[0]), &cfg, &bare_deps(&backend)).unwrap();
    assert_eq!(result.chat_calls, 1);
    assert_eq!(result.embed_calls, 0);
    assert_eq!(result.correct, Some(true));
    let log = backend.call_log();
    assert!(!log[0].messages[1].content.contains("Reference Example"));
}

#[test]
fn cot_mode_adds_the_step_instruction_without_retrieval() {
    let backend =
        MockChatBackend::new(MockScript::new().with_default("Thought: steps.\nAnswer: B"));
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { mode: Mode::Cot, ..PipelineConfig::default() };
    let (result, _) =
        run_instance(&InstanceInput::from(&dataset[0]), &cfg, &bare_deps(&backend)).unwrap();
    assert_eq!(result.chat_calls, 1);
    assert_eq!(result.embed_calls, 0);
    let log = backend.call_log();
    assert!(log[0].messages[1].content.contains("step by step"));
}

#[test]
fn rag_mode_retrieves_but_never_scores() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { mode: Mode::Rag, ..PipelineConfig::default() };
    let (result, _) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    assert_eq!(result.chat_calls, 1);
    assert_eq!(result.embed_calls, 1);
    assert_eq!(result.exemplar_ids.len(), 2);
    for call in backend.call_log() {
        let text: String = call.messages.iter().map(|m| m.content.clone()).collect();
        assert!(!text.contains("critical-thinking medical reviewer"));
    }
}

#[test]
fn fewshot_mode_prefers_the_train_pool() {
    use tags_core::corpus::FewShotDemo;
    let demos: Vec<FewShotDemo> = (0..6)
        .map(|i| FewShotDemo {
            id: format!("d{i}"),
            question: format!("Demo question {i}?"),
            options: options4(),
            answer: tags_core::corpus::AnswerLabel::new('B').unwrap(),
            rationale: None,
        })
        .collect();
    let backend =
        MockChatBackend::new(MockScript::new().with_default("Thought: t.\nAnswer: A"));
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { mode: Mode::FewShot, ..PipelineConfig::default() };
    let d = PipelineDeps { fewshot_pool: Some(&demos), ..bare_deps(&backend) };
    let (result, _) = run_instance(&InstanceInput::from(&dataset[0]), &cfg, &d).unwrap();
    assert_eq!(result.chat_calls, 1);
    assert_eq!(result.embed_calls, 0, "train-pool demos need no retrieval");
    let prompt = &backend.call_log()[0].messages[1].content;
    // Five demos (the configured count), shown with answer lines.
    assert!(prompt.contains("Reference Example 5"));
    assert!(!prompt.contains("Reference Example 6"));
    assert!(prompt.contains("Demo question 0?"));
    assert!(prompt.contains("Answer: B\n"));
}

#[test]
fn fewshot_mode_falls_back_to_corpus_retrieval() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { mode: Mode::FewShot, ..PipelineConfig::default() };
    let (result, _) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    assert_eq!(result.embed_calls, 1);
    assert_eq!(result.exemplar_ids.len(), 2);
}

#[test]
fn abstains_with_flag_when_every_candidate_is_degenerate() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(
        MockScript::new()
            .rule_contains(&["classifying clinical multiple-choice problems"], SPECIALTY_COMPLETION)
            .with_default("no parseable payload"),
    );
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig::default();
    let (result, _) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    assert!(result.abstained);
    assert_eq!(result.final_answer, None);
    assert_eq!(result.correct, Some(false));
    // Degenerate candidates are never sent to the reviewer.
    for call in backend.call_log() {
        let text: String = call.messages.iter().map(|m| m.content.clone()).collect();
        assert!(!text.contains("critical-thinking medical reviewer"));
    }
}

#[test]
fn gold_labels_never_reach_prompts() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(2);
    let cfg = PipelineConfig::default();
    let d = deps(&backend, &provider, &index, &corpus, &cache);
    for inst in &dataset {
        run_instance(&InstanceInput::from(inst), &cfg, &d).unwrap();
    }
    // In pipeline prompts the only legitimate "Answer:" occurrences are
    // format-hint lines and the reviewer's candidate-answer section; an
    // answer key leak would violate this.
    for call in backend.call_log() {
        for message in &call.messages {
            let text = message.content.as_str();
            let mut offset = 0;
            while let Some(pos) = text[offset..].find("Answer:") {
                let at = offset + pos;
                let tail = &text[at + "Answer:".len()..];
                let is_format_hint = tail.starts_with(" [one of");
                let is_reviewer_section = text[..at].ends_with("Final ");
                assert!(
                    is_format_hint || is_reviewer_section,
                    "unexpected answer text in prompt: {:?}",
                    &text[at..text.len().min(at + 40)]
                );
                offset = at + "Answer:".len();
            }
        }
    }
}

#[test]
fn specialist_count_knob_scales_candidates_and_calls() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { specialist_count: 2, ..PipelineConfig::default() };
    let (result, _) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    // 1 specialty + 3 round-1 + 3 round-2 + 6 scoring.
    assert_eq!(result.chat_calls, 13);
    assert_eq!(result.candidates.len(), 6);
    let tags: HashSet<String> = result.scores.keys().map(|t| t.to_string()).collect();
    assert!(tags.contains("S1x2") && tags.contains("S2x2"));
    // Second specialist slot takes the second-ranked field.
    let log = backend.call_log();
    assert!(log
        .iter()
        .any(|c| c.messages[0].content.contains("experienced specialist in Neurology")));
}

#[test]
fn final_answer_follows_the_highest_scored_candidate() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    // Generalist candidates answer C and score 5; specialists answer A
    // and score 3. G1 and G2 tie at the top, so priority selects G2.
    let backend = MockChatBackend::new(
        MockScript::new()
            .rule_contains(&["classifying clinical multiple-choice problems"], SPECIALTY_COMPLETION)
            .rule_contains(
                &["critical-thinking medical reviewer", "generalist reasoning"],
                "Score: 5",
            )
            .rule_contains(&["critical-thinking medical reviewer"], "Score: 3")
            .rule_contains(
                &["You are a general practitioner"],
                "Thought: generalist reasoning.\nAnswer: C",
            )
            .with_default("Thought: specialist reasoning.\nAnswer: A"),
    );
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig::default();
    let (result, _) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    assert_eq!(result.winner.map(|w| w.to_string()), Some("G2".into()));
    assert_eq!(result.final_answer.map(|a| a.letter()), Some('C'));
    assert_eq!(result.scores.values().map(|s| s.value).collect::<Vec<_>>(), vec![5, 3, 5, 3]);
}

#[test]
fn cross_stage_exclusion_can_exhaust_a_tiny_index_gracefully() {
    let corpus = fixture_corpus(2);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    // k = 2 over a 2-entry corpus: stage 1 takes everything, so
    // cross-stage exclusion leaves stage 2 with zero eligible rows and
    // round 2 degrades to its zero-shot form.
    let cfg = PipelineConfig { cross_stage_exclusion: true, ..PipelineConfig::default() };
    let (result, _) = run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    assert_eq!(result.chat_calls, 9);
    let stage2: Vec<_> =
        result.retrieval.iter().filter(|(stage, _)| stage.starts_with("stage2")).collect();
    assert_eq!(stage2.len(), 2);
    for (_, set) in stage2 {
        assert!(set.hits.is_empty());
        assert!(set.flagged_empty);
    }
    // Round-2 prompts carry no reference examples.
    let round2_prompts: Vec<String> = backend
        .call_log()
        .iter()
        .skip(3)
        .take(2)
        .map(|c| c.messages[1].content.clone())
        .collect();
    for prompt in round2_prompts {
        assert!(!prompt.contains("Reference Example"), "{prompt}");
    }
}

#[test]
fn carryover_knob_injects_round1_rationale_into_round2() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig { include_round1_in_round2: true, ..PipelineConfig::default() };
    run_instance(
        &InstanceInput::from(&dataset[0]),
        &cfg,
        &deps(&backend, &provider, &index, &corpus, &cache),
    )
    .unwrap();
    let log = backend.call_log();
    // Calls: specialty, G1, S1, G2, S2, then scoring.
    assert!(log[3].messages[1].content.contains("Your earlier reasoning for this question:"));
    assert!(log[3].messages[1].content.contains("generalist reasoning over the findings."));
    assert!(log[4].messages[1].content.contains("specialist reasoning over the findings."));
    assert!(!log[1].messages[1].content.contains("earlier reasoning"));
}

#[test]
fn run_eval_reports_pass_at_1_and_resumes() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let dataset = fixture_dataset(4);
    // q0/q1 answer A (gold), q2/q3 answer B (wrong).
    let script = answers_script(&[("mk2", 'B'), ("mk3", 'B')]);
    let cfg = PipelineConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("run.trace.jsonl");

    let backend = MockChatBackend::new(script.clone());
    let d = deps(&backend, &provider, &index, &corpus, &cache);
    let report = run_eval(&dataset[..2], "fixture", &cfg, &d, &trace_path, false).unwrap();
    assert_eq!(report.n, 2);
    assert_eq!(report.n_correct, 2);
    let calls_after_first = backend.call_count();
    assert_eq!(calls_after_first, 18);

    // Resume with the full dataset: only q2/q3 run.
    let report = run_eval(&dataset, "fixture", &cfg, &d, &trace_path, true).unwrap();
    assert_eq!(report.n, 4);
    assert_eq!(report.n_correct, 2);
    assert_eq!(report.pass_at_1, 0.5);
    assert_eq!(backend.call_count(), calls_after_first + 18);

    // Rerun over the complete trace: zero new backend calls, same report.
    let report2 = run_eval(&dataset, "fixture", &cfg, &d, &trace_path, true).unwrap();
    assert_eq!(backend.call_count(), calls_after_first + 18);
    assert_eq!(report2.n_correct, report.n_correct);
    assert_eq!(report2.pass_at_1, report.pass_at_1);
    assert_eq!(report2.per_instance, report.per_instance);
}

#[test]
fn backend_failure_aborts_the_run_resumably() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let dataset = fixture_dataset(3);
    let cfg = PipelineConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let trace_path = dir.path().join("run.trace.jsonl");

    // Script covers q0 completely but has no rule for q1's agent calls,
    // so q1 fails with a backend error after q0 is already on disk.
    let cache = EmbedCache::default();
    let broken = MockChatBackend::new(
        MockScript::new()
            .rule_contains(&["classifying clinical multiple-choice problems"], SPECIALTY_COMPLETION)
            .rule_contains(&["critical-thinking medical reviewer"], "Score: 3")
            .rule_contains(&["mk0"], "Thought: about mk0.\nAnswer: A"),
    );
    let d = deps(&broken, &provider, &index, &corpus, &cache);
    let err = run_eval(&dataset, "fixture", &cfg, &d, &trace_path, false).unwrap_err();
    assert!(matches!(err, tags_core::harness::HarnessError::Agent(_)), "{err:?}");

    // The partial trace holds exactly the completed instance.
    let records = tags_core::harness::read_trace(&trace_path).unwrap();
    let results: Vec<&str> = records
        .iter()
        .filter(|r| r.event_type == "instance_result")
        .map(|r| r.instance_id.as_str())
        .collect();
    assert_eq!(results, vec!["q0"]);

    // Resuming with a working backend finishes only the remaining two.
    let cache = EmbedCache::default();
    let fixed = MockChatBackend::new(tags_script());
    let d = deps(&fixed, &provider, &index, &corpus, &cache);
    let report = run_eval(&dataset, "fixture", &cfg, &d, &trace_path, true).unwrap();
    assert_eq!(report.n, 3);
    assert_eq!(fixed.call_count(), 18, "q0 must not be re-executed");
}

#[test]
fn worker_pool_width_does_not_change_trace_bytes() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let dataset = fixture_dataset(6);
    let dir = tempfile::tempdir().unwrap();

    let mut traces = Vec::new();
    for workers in [1usize, 3] {
        let cache = EmbedCache::default();
        let backend = MockChatBackend::new(tags_script());
        let d = deps(&backend, &provider, &index, &corpus, &cache);
        let cfg = PipelineConfig { workers, ..PipelineConfig::default() };
        let path = dir.path().join(format!("w{workers}.trace.jsonl"));
        run_eval(&dataset, "fixture", &cfg, &d, &path, false).unwrap();
        // Drop the run_start line (its config snapshot records the
        // differing pool width). Embed-call counters are
        // cache-attribution-dependent once instances run concurrently;
        // every other event must match the sequential trace byte for
        // byte, in the same order.
        let normalized = normalized_trace_with(&path, true);
        let body = normalized.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap();
        traces.push(body);
    }
    assert_eq!(traces[0], traces[1]);
}

#[test]
fn empty_dataset_is_an_error() {
    let backend = MockChatBackend::new(MockScript::new().with_default("x"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig { mode: Mode::ZeroShot, ..PipelineConfig::default() };
    let err = run_eval(
        &Vec::<EvalInstance>::new(),
        "empty",
        &cfg,
        &bare_deps(&backend),
        &dir.path().join("t.jsonl"),
        false,
    )
    .unwrap_err();
    assert!(matches!(err, tags_core::harness::HarnessError::EmptyDataset));
}

#[test]
fn report_header_matches_per_instance_rows() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(answers_script(&[("mk1", 'C')]));
    let dataset = fixture_dataset(3);
    let cfg = PipelineConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let d = deps(&backend, &provider, &index, &corpus, &cache);
    let report =
        run_eval(&dataset, "fixture", &cfg, &d, &dir.path().join("t.jsonl"), false).unwrap();
    let recount = report.per_instance.iter().filter(|s| s.correct == Some(true)).count();
    assert_eq!(report.n_correct, recount);
    assert_eq!(report.pass_at_1, recount as f64 / report.n as f64);
    assert_eq!(report.config.pipeline.k, 2);
}

#[test]
fn fingerprint_mismatch_blocks_the_run() {
    let corpus = fixture_corpus(5);
    let provider = DeterministicProvider::new(16);
    let index = fixture_index(&corpus, &provider);
    let other = DeterministicProvider::with_tag(16, "det-v2");
    let cache = EmbedCache::default();
    let backend = MockChatBackend::new(tags_script());
    let dataset = fixture_dataset(1);
    let cfg = PipelineConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let d = PipelineDeps {
        backend: &backend,
        verifier_backend: None,
        provider: Some(&other),
        index: Some(&index),
        corpus: Some(&corpus),
        fewshot_pool: None,
        embed_cache: Some(&cache),
    };
    let err =
        run_eval(&dataset, "fixture", &cfg, &d, &dir.path().join("t.jsonl"), false).unwrap_err();
    assert!(matches!(
        err,
        tags_core::harness::HarnessError::Embedding(
            tags_core::embedding::EmbeddingError::FingerprintMismatch { .. }
        )
    ));
}
