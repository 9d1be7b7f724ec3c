//! The four subcommands: index building, single questions, batch
//! evaluation, and trace inspection.

use std::path::{Path, PathBuf};

use clap::Args;
use tags_core::corpus::{load_corpus, load_eval_dataset, load_fewshot_demos, OptionList};
use tags_core::embedding::{
    build_index, ensure_fingerprint, load_index, save_index, BuildOptions, EmbeddingIndex,
};
use tags_core::harness::trace::{
    AggregationPayload, ChatCallPayload, InstanceSummary, RetrievalPayload, ScorePayload,
    SpecialtyPayload,
};
use tags_core::harness::{
    read_trace, run_eval, run_instance, EmbedCache, InstanceInput, Mode, PipelineConfig,
    PipelineDeps, TraceWriter,
};

use crate::config::{ConfigFile, PipelineOverrides};
use crate::CliError;

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    /// Corpus file (JSON Lines) to embed.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output index file.
    #[arg(long)]
    pub out: PathBuf,
    /// Provider kind override: "deterministic" or "http".
    #[arg(long)]
    pub provider: Option<String>,
    /// Vector width override.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Entries embedded per provider request.
    #[arg(long)]
    pub batch_entries: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    /// The question text.
    #[arg(long)]
    pub question: String,
    /// Comma-separated option texts (first becomes A, second B, ...).
    #[arg(long)]
    pub options: String,
    /// Pipeline mode: tags, zero-shot, few-shot, rag or cot.
    #[arg(long)]
    pub mode: Option<String>,
    /// Exemplars per retrieval set.
    #[arg(long)]
    pub k: Option<usize>,
    /// Drop the n most similar entries before taking k.
    #[arg(long)]
    pub exclude_top_n: Option<usize>,
    /// Specialty rank the specialist uses (1-3).
    #[arg(long)]
    pub specialist_rank: Option<u8>,
    /// Write the full per-event record of this question here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Evaluation dataset file (JSON Lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Trace file (default: `<dataset stem>.trace.jsonl`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Report file (default: `<dataset stem>.report.json`).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Skip instances already completed in the trace file.
    #[arg(long)]
    pub resume: bool,
    /// Pipeline mode override.
    #[arg(long)]
    pub mode: Option<String>,
    /// Exemplars per retrieval set.
    #[arg(long)]
    pub k: Option<usize>,
    /// Worker-pool width override.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Trace file written by eval or ask.
    #[arg(long)]
    pub trace: PathBuf,
    /// Instance id to render.
    #[arg(long)]
    pub instance: String,
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} file not found: {}", path.display())))
    }
}

fn partial_path(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".partial");
    PathBuf::from(os)
}

pub fn cmd_build_index(args: &BuildIndexArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let config = ConfigFile::load(config_path)?;
    require_file(&args.corpus, "corpus")?;
    let corpus = load_corpus(&args.corpus).map_err(CliError::usage)?;
    let provider = config.build_provider(args.provider.as_deref(), args.dim)?;

    if args.out.exists() {
        let existing = load_index(&args.out).map_err(CliError::domain)?;
        if ensure_fingerprint(&existing, provider.as_ref()).is_err() {
            return Err(CliError::domain(format!(
                "existing index {} was built by provider {:?}; current provider is {:?}",
                args.out.display(),
                existing.provider_fingerprint(),
                provider.fingerprint()
            )));
        }
        if existing.matches_corpus(&corpus) {
            println!("index already complete ({} rows); nothing to do", existing.len());
            println!("provider fingerprint: {}", existing.provider_fingerprint());
            return Ok(());
        }
    }

    let mut options = BuildOptions {
        partial_path: Some(partial_path(&args.out)),
        ..BuildOptions::default()
    };
    if let Some(batch) = args.batch_entries {
        options.batch_entries = batch;
    }
    let (index, stats) =
        build_index(&corpus, provider.as_ref(), &options).map_err(CliError::domain)?;
    save_index(&index, &args.out).map_err(CliError::domain)?;
    if let Some(partial) = &options.partial_path {
        let _ = std::fs::remove_file(partial);
    }
    if stats.resumed > 0 {
        println!("resumed {} previously embedded entries", stats.resumed);
    }
    println!("indexed {} entries; {} rows -> {}", stats.embedded, index.len(), args.out.display());
    println!("provider fingerprint: {}", index.provider_fingerprint());
    Ok(())
}

struct LoadedDeps {
    backend: Box<dyn tags_core::agents::ChatBackend>,
    verifier_backend: Option<Box<dyn tags_core::agents::ChatBackend>>,
    provider: Option<Box<dyn tags_core::embedding::EmbeddingProvider>>,
    index: Option<EmbeddingIndex>,
    corpus: Option<tags_core::corpus::Corpus>,
    fewshot_pool: Option<Vec<tags_core::corpus::FewShotDemo>>,
    cache: EmbedCache,
}

impl LoadedDeps {
    fn deps(&self) -> PipelineDeps<'_> {
        PipelineDeps {
            backend: self.backend.as_ref(),
            verifier_backend: self.verifier_backend.as_deref(),
            provider: self.provider.as_deref(),
            index: self.index.as_ref(),
            corpus: self.corpus.as_ref(),
            fewshot_pool: self.fewshot_pool.as_deref(),
            embed_cache: Some(&self.cache),
        }
    }
}

fn load_deps(config: &ConfigFile, cfg: &PipelineConfig) -> Result<LoadedDeps, CliError> {
    let backend = config.build_backend()?;
    let verifier_backend = config.build_verifier_backend()?;
    let fewshot_pool = match (&cfg.mode, &config.paths.fewshot_train) {
        (Mode::FewShot, Some(path)) => {
            require_file(path, "few-shot train")?;
            Some(load_fewshot_demos(path).map_err(CliError::usage)?)
        }
        _ => None,
    };
    let needs_index = match cfg.mode {
        Mode::Tags | Mode::Rag => true,
        Mode::FewShot => fewshot_pool.is_none(),
        Mode::ZeroShot | Mode::Cot => false,
    };
    let (provider, index, corpus) = if needs_index {
        let corpus_path = config
            .paths
            .corpus
            .as_ref()
            .ok_or_else(|| CliError::usage("config key \"paths.corpus\" is required for this mode"))?;
        let index_path = config
            .paths
            .index
            .as_ref()
            .ok_or_else(|| CliError::usage("config key \"paths.index\" is required for this mode"))?;
        require_file(corpus_path, "corpus")?;
        require_file(index_path, "index")?;
        let corpus = load_corpus(corpus_path).map_err(CliError::usage)?;
        let index = load_index(index_path).map_err(CliError::domain)?;
        let provider = config.build_provider(None, Some(index.dim()))?;
        ensure_fingerprint(&index, provider.as_ref()).map_err(CliError::domain)?;
        (Some(provider), Some(index), Some(corpus))
    } else {
        (None, None, None)
    };
    Ok(LoadedDeps {
        backend,
        verifier_backend,
        provider,
        index,
        corpus,
        fewshot_pool,
        cache: EmbedCache::default(),
    })
}

pub fn cmd_ask(args: &AskArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let config = ConfigFile::load(config_path)?;
    let overrides = PipelineOverrides {
        mode: args.mode.clone(),
        k: args.k,
        exclude_top_n: args.exclude_top_n,
        specialist_rank: args.specialist_rank,
        workers: None,
    };
    let cfg = config.pipeline_config(&overrides)?;
    let texts: Vec<String> =
        args.options.split(',').map(|s| s.trim().to_string()).collect();
    let options = OptionList::new(texts)
        .map_err(|e| CliError::usage(format!("--options: {e}")))?;
    let loaded = load_deps(&config, &cfg)?;
    let input = InstanceInput {
        id: "cli".to_string(),
        question: args.question.clone(),
        options,
        gold: None,
    };
    let (result, events) =
        run_instance(&input, &cfg, &loaded.deps()).map_err(CliError::domain)?;

    if let Some(trace_path) = &args.trace {
        let mut writer = TraceWriter::create(trace_path).map_err(CliError::domain)?;
        for event in &events {
            writer.write(event).map_err(CliError::domain)?;
        }
    }

    if result.abstained {
        return Err(CliError::domain("abstained: every candidate was degenerate"));
    }
    match result.final_answer {
        Some(answer) => println!("answer: {answer}"),
        None => println!("answer: (none)"),
    }
    if let Some(winner) = result.winner {
        println!("winner: {winner}");
    }
    if !result.scores.is_empty() {
        let rendered: Vec<String> =
            result.scores.iter().map(|(tag, score)| format!("{tag}={}", score.value)).collect();
        println!("scores: {}", rendered.join(" "));
    }
    if !result.exemplar_ids.is_empty() {
        println!("exemplars: {}", result.exemplar_ids.join(", "));
    }
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs, config_path: Option<&Path>) -> Result<(), CliError> {
    let config = ConfigFile::load(config_path)?;
    let overrides = PipelineOverrides {
        mode: args.mode.clone(),
        k: args.k,
        exclude_top_n: None,
        specialist_rank: None,
        workers: args.workers,
    };
    let cfg = config.pipeline_config(&overrides)?;
    require_file(&args.dataset, "dataset")?;
    let dataset = load_eval_dataset(&args.dataset).map_err(CliError::usage)?;
    let stem = args
        .dataset
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "eval".to_string());
    let trace_path = args.trace.clone().unwrap_or_else(|| PathBuf::from(format!("{stem}.trace.jsonl")));
    let report_path =
        args.report.clone().unwrap_or_else(|| PathBuf::from(format!("{stem}.report.json")));

    let loaded = load_deps(&config, &cfg)?;
    let report = run_eval(&dataset, &stem, &cfg, &loaded.deps(), &trace_path, args.resume)
        .map_err(CliError::domain)?;
    let rendered = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&report_path, rendered).map_err(CliError::domain)?;

    println!("pass@1 = {:.3} ({}/{})", report.pass_at_1, report.n_correct, report.n);
    println!("trace: {}", trace_path.display());
    println!("report: {}", report_path.display());
    Ok(())
}

pub fn cmd_trace(args: &TraceArgs) -> Result<(), CliError> {
    let records = read_trace(&args.trace).map_err(CliError::domain)?;
    let instance: Vec<_> =
        records.iter().filter(|r| r.instance_id == args.instance).collect();
    if instance.is_empty() {
        return Err(CliError::domain(format!(
            "no records for instance {:?} in {}",
            args.instance,
            args.trace.display()
        )));
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match render_instance(&mut out, &args.instance, &instance) {
        Ok(()) => Ok(()),
        // Output piped into a pager or `head` that exited early.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(CliError::domain(e)),
    }
}

fn render_instance(
    out: &mut impl std::io::Write,
    instance_id: &str,
    records: &[&tags_core::harness::TraceRecord],
) -> std::io::Result<()> {
    writeln!(out, "instance {} ({} events)", instance_id, records.len())?;
    for record in records {
        match record.event_type.as_str() {
            "specialty" => {
                if let Ok(p) = serde_json::from_value::<SpecialtyPayload>(record.payload.clone()) {
                    writeln!(
                        out,
                        "specialty: {} (rank {} of {})",
                        p.chosen,
                        p.chosen_rank,
                        p.ranked_fields.join(" | ")
                    )?;
                }
            }
            "retrieval" => {
                if let Ok(p) = serde_json::from_value::<RetrievalPayload>(record.payload.clone()) {
                    let hits: Vec<String> = p
                        .set
                        .hits
                        .iter()
                        .map(|h| format!("{} ({:.6})", h.entry_id, h.score))
                        .collect();
                    writeln!(out, "retrieval {}: [{}]", p.stage, hits.join(", "))?;
                }
            }
            "chat_call" => {
                if let Ok(p) = serde_json::from_value::<ChatCallPayload>(record.payload.clone()) {
                    writeln!(out, "--- chat {} (digest {}) ---", p.label, &p.prompt_digest[..12])?;
                    for message in &p.messages {
                        let role = match message.role {
                            tags_core::agents::Role::System => "system",
                            tags_core::agents::Role::User => "user",
                        };
                        writeln!(out, "[{role}]")?;
                        writeln!(out, "{}", message.content)?;
                    }
                    writeln!(out, "[completion]")?;
                    writeln!(out, "{}", p.completion)?;
                }
            }
            "score" => {
                if let Ok(p) = serde_json::from_value::<ScorePayload>(record.payload.clone()) {
                    writeln!(out, "score {}: {}", p.tag, p.value)?;
                }
            }
            "aggregation" => {
                if let Ok(p) = serde_json::from_value::<AggregationPayload>(record.payload.clone()) {
                    writeln!(
                        out,
                        "winner: {} -> {}{}",
                        p.winner,
                        p.final_answer,
                        if p.tie_broken { " (tie broken)" } else { "" }
                    )?;
                } else {
                    writeln!(out, "aggregation: {}", record.payload)?;
                }
            }
            "instance_result" => {
                if let Ok(p) = serde_json::from_value::<InstanceSummary>(record.payload.clone()) {
                    writeln!(
                        out,
                        "result: answer {:?} correct {:?} ({} chat calls, {} embed calls, {} ms)",
                        p.final_answer.map(|a| a.to_string()),
                        p.correct,
                        p.chat_calls,
                        p.embed_calls,
                        p.wall_ms
                    )?;
                }
            }
            other => writeln!(out, "{other}: {}", record.payload)?,
        }
    }
    Ok(())
}
