//! Data model and ingestion for the exemplar corpus and evaluation datasets.
//!
//! Both file kinds are UTF-8 JSON Lines with LF line endings, one record
//! per line. Corpus records carry `id`, `question`, `options` (array of
//! option texts; position 0 is labeled A), `answer` (single letter) and
//! `rationale`. Evaluation records use the same shape minus `rationale`,
//! with `gold` in place of `answer`. Option labels are positional and
//! never stored redundantly. Text is preserved verbatim; no Unicode
//! normalization is applied.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from corpus and evaluation-dataset ingestion.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("file contains no records")]
    EmptyCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A single uppercase option letter in `A..=Z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AnswerLabel(char);

impl AnswerLabel {
    pub fn new(letter: char) -> Result<Self, String> {
        if letter.is_ascii_uppercase() {
            Ok(Self(letter))
        } else {
            Err(format!("answer label must be a single letter A..Z, got {letter:?}"))
        }
    }

    /// Label for a 0-based option position (0 -> A). `None` past `Z`.
    pub fn from_index(index: usize) -> Option<Self> {
        if index < 26 {
            Some(Self((b'A' + index as u8) as char))
        } else {
            None
        }
    }

    /// 0-based option position (A -> 0).
    pub fn index(self) -> usize {
        (self.0 as u8 - b'A') as usize
    }

    pub fn letter(self) -> char {
        self.0
    }
}

impl fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl TryFrom<String> for AnswerLabel {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        let mut chars = value.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::new(c),
            _ => Err(format!("answer label must be a single letter A..Z, got {value:?}")),
        }
    }
}

impl From<AnswerLabel> for String {
    fn from(label: AnswerLabel) -> Self {
        label.0.to_string()
    }
}

/// An ordered list of option texts. Labels are positional: index 0 is A,
/// index 1 is B, and so on. Length is between 2 and 26 and every text is
/// non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct OptionList {
    texts: Vec<String>,
}

impl OptionList {
    pub fn new(texts: Vec<String>) -> Result<Self, String> {
        if texts.len() < 2 {
            return Err(format!("option list needs at least 2 entries, got {}", texts.len()));
        }
        if texts.len() > 26 {
            return Err(format!("option list exceeds 26 entries ({})", texts.len()));
        }
        if let Some(pos) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(format!(
                "option {} has empty text",
                AnswerLabel::from_index(pos).expect("validated above")
            ));
        }
        Ok(Self { texts })
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    pub fn contains(&self, label: AnswerLabel) -> bool {
        label.index() < self.texts.len()
    }

    pub fn text_for(&self, label: AnswerLabel) -> Option<&str> {
        self.texts.get(label.index()).map(String::as_str)
    }

    /// Iterate `(label, text)` pairs in label order.
    pub fn iter(&self) -> impl Iterator<Item = (AnswerLabel, &str)> {
        self.texts
            .iter()
            .enumerate()
            .map(|(i, t)| (AnswerLabel::from_index(i).expect("length <= 26"), t.as_str()))
    }

    /// One line per option, `"<label>. <text>"`, joined by `\n`.
    pub fn render_lines(&self) -> String {
        let mut out = String::new();
        for (i, (label, text)) in self.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("{label}. {text}"));
        }
        out
    }

    /// The available letters joined by `", "`, e.g. `"A, B, C, D"`.
    pub fn letters_joined(&self) -> String {
        self.iter()
            .map(|(label, _)| label.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl TryFrom<Vec<String>> for OptionList {
    type Error = String;

    fn try_from(texts: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(texts)
    }
}

impl From<OptionList> for Vec<String> {
    fn from(options: OptionList) -> Self {
        options.texts
    }
}

/// One retrievable exemplar: a question with labeled options, its gold
/// answer, and a worked chain-of-thought rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub question: String,
    pub options: OptionList,
    pub answer: AnswerLabel,
    pub rationale: String,
}

/// The full exemplar corpus, in file order, with unique entry ids.
#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    source_name: String,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(entries: Vec<CorpusEntry>, source_name: impl Into<String>) -> Result<Self, CorpusError> {
        if entries.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut by_id = HashMap::with_capacity(entries.len());
        for (i, entry) in entries.iter().enumerate() {
            if by_id.insert(entry.id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateId(entry.id.clone()));
            }
        }
        Ok(Self { entries, source_name: source_name.into(), by_id })
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_name(&self) -> &str {
        &self.source_name
    }

    pub fn get(&self, id: &str) -> Option<&CorpusEntry> {
        self.by_id.get(id).map(|&i| &self.entries[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn id_set(&self) -> HashSet<&str> {
        self.ids().collect()
    }

    /// Serialize back to the line-delimited record format.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for entry in &self.entries {
            let line = serde_json::to_string(entry).expect("corpus entries serialize");
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One benchmark question with its gold answer label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub question: String,
    pub options: OptionList,
    pub gold: AnswerLabel,
}

/// One in-context demonstration for the few-shot baseline. Unlike corpus
/// entries, the rationale is optional: dataset train splits usually carry
/// only the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotDemo {
    pub id: String,
    pub question: String,
    pub options: OptionList,
    pub answer: AnswerLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

fn malformed(line: usize, reason: impl fmt::Display) -> CorpusError {
    CorpusError::MalformedRecord { line, reason: reason.to_string() }
}

fn validate_question(line: usize, question: &str) -> Result<(), CorpusError> {
    if question.trim().is_empty() {
        Err(malformed(line, "question is empty"))
    } else {
        Ok(())
    }
}

fn validate_label_in_options(
    line: usize,
    field: &str,
    label: AnswerLabel,
    options: &OptionList,
) -> Result<(), CorpusError> {
    if options.contains(label) {
        Ok(())
    } else {
        let last = AnswerLabel::from_index(options.len() - 1).expect("non-empty options");
        Err(malformed(line, format!("{field} label {label} outside options A..{last}")))
    }
}

fn parse_lines<T, F>(path: &Path, mut parse: F) -> Result<Vec<T>, CorpusError>
where
    F: FnMut(usize, &str) -> Result<T, CorpusError>,
{
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(i + 1, &line)?);
    }
    Ok(out)
}

/// Load and validate an exemplar corpus. Record order is preserved.
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let entries = parse_lines(path, |line_no, line| {
        let entry: CorpusEntry =
            serde_json::from_str(line).map_err(|e| malformed(line_no, e))?;
        validate_question(line_no, &entry.question)?;
        if entry.rationale.trim().is_empty() {
            return Err(malformed(line_no, "rationale is empty"));
        }
        validate_label_in_options(line_no, "answer", entry.answer, &entry.options)?;
        Ok(entry)
    })?;
    let source_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string());
    Corpus::new(entries, source_name)
}

/// Load and validate an evaluation dataset. Record order is preserved.
pub fn load_eval_dataset(path: &Path) -> Result<Vec<EvalInstance>, CorpusError> {
    let instances = parse_lines(path, |line_no, line| {
        let inst: EvalInstance =
            serde_json::from_str(line).map_err(|e| malformed(line_no, e))?;
        validate_question(line_no, &inst.question)?;
        validate_label_in_options(line_no, "gold", inst.gold, &inst.options)?;
        Ok(inst)
    })?;
    if instances.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut seen = HashSet::new();
    for inst in &instances {
        if !seen.insert(inst.id.as_str()) {
            return Err(CorpusError::DuplicateId(inst.id.clone()));
        }
    }
    Ok(instances)
}

/// Load few-shot demonstrations (corpus schema with optional rationale).
pub fn load_fewshot_demos(path: &Path) -> Result<Vec<FewShotDemo>, CorpusError> {
    let demos = parse_lines(path, |line_no, line| {
        let demo: FewShotDemo =
            serde_json::from_str(line).map_err(|e| malformed(line_no, e))?;
        validate_question(line_no, &demo.question)?;
        validate_label_in_options(line_no, "answer", demo.answer, &demo.options)?;
        Ok(demo)
    })?;
    if demos.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(demos)
}

/// Deterministic query text for retrieval and prompting: the question,
/// a newline, then one `"<label>. <text>"` line per option in label
/// order.
///
/// Injective over `(question, options)` pairs as long as the question
/// text does not itself end in option-line-shaped suffixes (a question
/// without embedded newlines always satisfies this).
pub fn render_query_text(question: &str, options: &OptionList) -> String {
    format!("{question}\n{}", options.render_lines())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn options(texts: &[&str]) -> OptionList {
        OptionList::new(texts.iter().map(|t| t.to_string()).collect()).unwrap()
    }

    fn write_temp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_corpus_preserves_order() {
        let f = write_temp(&[
            r#"{"id":"q1","question":"Why?","options":["x","y"],"answer":"A","rationale":"r1"}"#,
            r#"{"id":"q2","question":"How?","options":["x","y","z"],"answer":"C","rationale":"r2"}"#,
            r#"{"id":"q3","question":"When?","options":["x","y"],"answer":"B","rationale":"r3"}"#,
        ]);
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 3);
        let ids: Vec<_> = corpus.ids().collect();
        assert_eq!(ids, vec!["q1", "q2", "q3"]);
        assert_eq!(corpus.get("q2").unwrap().answer.letter(), 'C');
    }

    #[test]
    fn load_corpus_rejects_answer_outside_options() {
        let f = write_temp(&[
            r#"{"id":"q1","question":"Why?","options":["x","y","z","w"],"answer":"E","rationale":"r"}"#,
        ]);
        let err = load_corpus(f.path()).unwrap_err();
        match err {
            CorpusError::MalformedRecord { line, reason } => {
                assert_eq!(line, 1);
                assert!(reason.contains('E'), "reason: {reason}");
            }
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_rejects_duplicate_ids() {
        let f = write_temp(&[
            r#"{"id":"q1","question":"Why?","options":["x","y"],"answer":"A","rationale":"r"}"#,
            r#"{"id":"q1","question":"How?","options":["x","y"],"answer":"B","rationale":"r"}"#,
        ]);
        match load_corpus(f.path()).unwrap_err() {
            CorpusError::DuplicateId(id) => assert_eq!(id, "q1"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_rejects_empty_file() {
        let f = write_temp(&[]);
        assert!(matches!(load_corpus(f.path()).unwrap_err(), CorpusError::EmptyCorpus));
    }

    #[test]
    fn load_eval_dataset_counts_and_validates() {
        let lines: Vec<String> = (0..10)
            .map(|i| {
                format!(r#"{{"id":"e{i}","question":"Q{i}","options":["a","b","c"],"gold":"B"}}"#)
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = write_temp(&refs);
        let instances = load_eval_dataset(f.path()).unwrap();
        assert_eq!(instances.len(), 10);

        let f = write_temp(&[r#"{"id":"e0","question":"Q","options":["a","b"],"gold":"D"}"#]);
        assert!(matches!(
            load_eval_dataset(f.path()).unwrap_err(),
            CorpusError::MalformedRecord { line: 1, .. }
        ));
    }

    #[test]
    fn load_eval_dataset_handles_benchmark_scale() {
        // Mirrors the size of the full hard-subset benchmark.
        let lines: Vec<String> = (0..862)
            .map(|i| {
                format!(r#"{{"id":"h{i}","question":"Q{i}","options":["a","b","c","d"],"gold":"A"}}"#)
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let f = write_temp(&refs);
        assert_eq!(load_eval_dataset(f.path()).unwrap().len(), 862);
    }

    #[test]
    fn option_list_enforces_bounds_and_nonempty_text() {
        assert!(OptionList::new(vec!["a".into()]).is_err());
        assert!(OptionList::new(vec!["a".into(), " ".into()]).is_err());
        assert!(OptionList::new(vec!["a".into(), "b".into()]).is_ok());
        assert!(OptionList::new((0..27).map(|i| format!("t{i}")).collect()).is_err());
    }

    #[test]
    fn render_query_text_matches_contract() {
        let opts = options(&["x", "y"]);
        assert_eq!(render_query_text("Why?", &opts), "Why?\nA. x\nB. y");
        // Re-rendering yields byte-identical output.
        assert_eq!(render_query_text("Why?", &opts), render_query_text("Why?", &opts));
    }

    #[test]
    fn answer_label_round_trips_and_validates() {
        assert_eq!(AnswerLabel::new('C').unwrap().index(), 2);
        assert_eq!(AnswerLabel::from_index(25).unwrap().letter(), 'Z');
        assert!(AnswerLabel::from_index(26).is_none());
        assert!(AnswerLabel::new('a').is_err());
        assert!(AnswerLabel::try_from("AB".to_string()).is_err());
    }

    fn entry_strategy() -> impl Strategy<Value = CorpusEntry> {
        // Leading alphanumeric keeps generated text from being
        // whitespace-only, which ingestion rejects.
        let text = "[a-zA-Z0-9][a-zA-Z0-9 ,.?-]{0,39}";
        (
            "[a-z0-9]{1,8}",
            text,
            proptest::collection::vec(text, 2..6),
            text,
        )
            .prop_map(|(id, question, opts, rationale)| {
                let options = OptionList::new(opts).unwrap();
                CorpusEntry {
                    id,
                    question,
                    answer: AnswerLabel::from_index(0).unwrap(),
                    options,
                    rationale,
                }
            })
    }

    proptest! {
        #[test]
        fn corpus_round_trips_through_jsonl(entries in proptest::collection::vec(entry_strategy(), 1..8)) {
            let mut unique = entries;
            for (i, e) in unique.iter_mut().enumerate() {
                e.id = format!("id{i}");
            }
            let corpus = Corpus::new(unique, "prop").unwrap();
            let mut buf = Vec::new();
            corpus.write_jsonl(&mut buf).unwrap();
            let mut f = tempfile::NamedTempFile::new().unwrap();
            f.write_all(&buf).unwrap();
            f.flush().unwrap();
            let reloaded = load_corpus(f.path()).unwrap();
            prop_assert_eq!(corpus.entries(), reloaded.entries());
        }

        #[test]
        fn render_query_text_injective_for_newline_free_questions(
            q1 in "[a-zA-Z0-9 ]{1,20}",
            q2 in "[a-zA-Z0-9 ]{1,20}",
            o1 in proptest::collection::vec("[a-z]{1,6}", 2..5),
            o2 in proptest::collection::vec("[a-z]{1,6}", 2..5),
        ) {
            let opts1 = OptionList::new(o1).unwrap();
            let opts2 = OptionList::new(o2).unwrap();
            let same_input = q1 == q2 && opts1 == opts2;
            let same_output = render_query_text(&q1, &opts1) == render_query_text(&q2, &opts2);
            prop_assert_eq!(same_input, same_output);
        }
    }
}
