use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use medrag_core::adapters::kernels_selftest;
use medrag_core::chunker::ChunkConfig;
use medrag_core::corpus::{
    export_chat_format, load_corpus, to_knowledge_documents, write_chat_jsonl, CorpusError,
    CorpusFormat, Grouping, KnowledgeDocument,
};
use medrag_core::embed::{EmbedError, Embedder, LocalEmbedder, RemoteEmbedder};
use medrag_core::genkit::{
    GenError, GenerationParams, Generator, RemoteChat, StubGenerator, StubMode,
};
use medrag_core::harness::{
    export_chart_data, load_dataset, render_summary_markdown, run_eval, write_report_dir,
    HarnessError, MetricConfig, MetricReport,
};
use medrag_core::index::{IndexError, SearchHit, VectorIndex, MANIFEST_FILE};
use medrag_core::metrics::{BleuConfig, RougeVariant, Smoothing};
use medrag_core::pipeline::{
    answer, answer_once, ingest_documents, load_system_prompt, new_session_from, PipelineError,
    SessionConfig, SessionOverrides, DEFAULT_SYSTEM_PROMPT, DISCLAIMER,
};
use medrag_core::transport::RemoteError;
use serde_json::{json, Value};

use crate::{
    CliError, Command, EmbedderKind, GeneratorArgs, GeneratorKind, GroupingKind, InputFormat,
    KernelsAction, Output, RougeKind, SmoothingKind, StubKind, SystemKind,
};

/// Writes to stdout; a closed pipe ends the process quietly.
macro_rules! out {
    ($($arg:tt)*) => {
        $crate::commands::emit(format_args!($($arg)*))
    };
}

macro_rules! outln {
    () => {
        out!("\n")
    };
    ($($arg:tt)*) => {
        out!("{}\n", format_args!($($arg)*))
    };
}

pub(crate) fn emit(args: std::fmt::Arguments<'_>) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_fmt(args).and_then(|_| stdout.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: cannot write output: {e}");
        std::process::exit(2);
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn user(e: impl std::fmt::Display) -> CliError {
    CliError::User(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

fn remote_err(e: &RemoteError) -> CliError {
    match e {
        RemoteError::Config(_) | RemoteError::Auth { .. } => user(e),
        _ => internal(e),
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        user(e)
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> Self {
        match &e {
            EmbedError::Remote(r) => remote_err(r),
            _ => user(e),
        }
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        match &e {
            GenError::Remote(r) => remote_err(r),
            GenError::EmptyCompletion => internal(e),
            _ => user(e),
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        match e {
            IndexError::Io(_) => internal(e),
            _ => user(e),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Embed(e) => e.into(),
            PipelineError::Generate(e) => e.into(),
            PipelineError::Index(e) => e.into(),
            other => user(other),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Io(_) | HarnessError::SystemFailure { .. } => internal(e),
            _ => user(e),
        }
    }
}

pub fn run(command: Command) -> CliResult {
    match command {
        Command::Ingest {
            path,
            format,
            export_chat,
            output,
        } => ingest(&path, format, export_chat.as_deref(), output),
        Command::Index {
            path,
            format,
            chunk_size,
            chunk_overlap,
            out,
            grouping,
            embedder,
            dim,
            output,
        } => index(
            &path,
            format,
            chunk_size,
            chunk_overlap,
            &out,
            grouping,
            embedder,
            dim,
            output,
        ),
        Command::Search {
            dir,
            query,
            k,
            embedder,
            output,
        } => search(&dir, &query, k, embedder, output),
        Command::Chat {
            dir,
            gen,
            embedder,
            output,
        } => chat(&dir, &gen, embedder, output),
        Command::Eval {
            dataset,
            system,
            index,
            gen,
            embedder,
            names,
            report_dir,
            jobs,
            rouge,
            bleu_smoothing,
            output,
        } => eval(EvalArgs {
            dataset,
            systems: system,
            index,
            gen,
            embedder,
            names,
            report_dir,
            jobs,
            rouge,
            bleu_smoothing,
            output,
        }),
        Command::Serve { config } => serve(config.as_deref()),
        Command::Kernels {
            action: KernelsAction::Selftest { seed, output },
        } => selftest(seed, output),
    }
}

fn print_json(value: &Value) {
    outln!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value serialises")
    );
}

fn corpus_format(path: &Path, format: Option<InputFormat>) -> Option<CorpusFormat> {
    match format {
        Some(InputFormat::Tagged) => Some(CorpusFormat::Tagged),
        Some(InputFormat::Tabular) => Some(CorpusFormat::Tabular),
        Some(InputFormat::Text) => None,
        None => Some(CorpusFormat::guess(path)),
    }
}

fn ingest(
    path: &Path,
    format: Option<InputFormat>,
    export_chat: Option<&Path>,
    output: Output,
) -> CliResult {
    let Some(fmt) = corpus_format(path, format) else {
        return Err(user(
            "`ingest` parses dialogue corpora; use --format tagged or tabular",
        ));
    };
    let exchanges = load_corpus(path, Some(fmt))?;
    let mut sources: Vec<&str> = exchanges.iter().map(|e| e.source.as_str()).collect();
    sources.dedup();
    if let Some(target) = export_chat {
        let records = export_chat_format(&exchanges)?;
        std::fs::write(target, write_chat_jsonl(&records))
            .map_err(|e| internal(format!("{}: {e}", target.display())))?;
    }
    match output {
        Output::Json => print_json(&json!({
            "path": path,
            "format": format!("{fmt:?}").to_lowercase(),
            "exchanges": exchanges.len(),
            "sources": sources,
            "chat_export": export_chat,
        })),
        Output::Text => {
            outln!("{}: {} exchanges", path.display(), exchanges.len());
            if let Some(target) = export_chat {
                outln!("chat records written to {}", target.display());
            }
        }
    }
    Ok(())
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("document")
        .to_string()
}

fn load_documents(
    path: &Path,
    format: Option<InputFormat>,
    grouping: GroupingKind,
) -> CliResult<Vec<KnowledgeDocument>> {
    match corpus_format(path, format) {
        None => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| user(format!("{}: {e}", path.display())))?;
            if text.trim().is_empty() {
                return Err(user(format!("{} is empty", path.display())));
            }
            let id = file_label(path);
            Ok(vec![KnowledgeDocument {
                id: id.clone(),
                source: id,
                seq_range: (0, 0),
                text,
            }])
        }
        Some(fmt) => {
            let exchanges = load_corpus(path, Some(fmt))?;
            let grouping = match grouping {
                GroupingKind::Exchange => Grouping::PerExchange,
                GroupingKind::Document => Grouping::PerDocument,
            };
            Ok(to_knowledge_documents(&exchanges, grouping)?)
        }
    }
}

fn open_or_new(dir: &Path) -> CliResult<VectorIndex> {
    if dir.join(MANIFEST_FILE).is_file() {
        Ok(VectorIndex::load(dir)?)
    } else {
        Ok(VectorIndex::new())
    }
}

fn open_existing(dir: &Path) -> CliResult<VectorIndex> {
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(user(format!(
            "{} holds no index; run `medrag index` first",
            dir.display()
        )));
    }
    Ok(VectorIndex::load(dir)?)
}

/// Local embedders take their dimension from the index so queries always match it.
fn embedder_for(
    kind: EmbedderKind,
    index: &VectorIndex,
    default_dim: usize,
) -> CliResult<Box<dyn Embedder>> {
    match kind {
        EmbedderKind::Local => Ok(Box::new(LocalEmbedder::new(
            index.dim().unwrap_or(default_dim),
        )?)),
        EmbedderKind::Remote => Ok(Box::new(RemoteEmbedder::from_env()?)),
    }
}

#[allow(clippy::too_many_arguments)]
fn index(
    path: &Path,
    format: Option<InputFormat>,
    chunk_size: usize,
    chunk_overlap: usize,
    out: &Path,
    grouping: GroupingKind,
    embedder: EmbedderKind,
    dim: usize,
    output: Output,
) -> CliResult {
    let chunking = ChunkConfig::new(chunk_size, chunk_overlap).map_err(user)?;
    let documents = load_documents(path, format, grouping)?;
    let mut idx = open_or_new(out)?;
    let embedder: Box<dyn Embedder> = match embedder {
        EmbedderKind::Local => Box::new(LocalEmbedder::new(dim)?),
        EmbedderKind::Remote => Box::new(RemoteEmbedder::from_env()?),
    };
    let report = ingest_documents(&mut idx, &documents, &chunking, embedder.as_ref())?;
    let manifest = idx.persist(out)?;
    match output {
        Output::Json => print_json(&json!({
            "documents": report.documents,
            "chunks": report.chunks,
            "inserted": report.inserted,
            "duplicates": report.duplicates,
            "index_size": manifest.entry_count,
            "dim": manifest.dim,
            "provider_tag": manifest.provider_tag,
            "dir": out,
        })),
        Output::Text => {
            outln!(
                "{} documents -> {} chunks ({} new, {} duplicates)",
                report.documents,
                report.chunks,
                report.inserted,
                report.duplicates
            );
            outln!(
                "index at {} now holds {} chunks",
                out.display(),
                manifest.entry_count
            );
        }
    }
    Ok(())
}

fn excerpt(text: &str, chars: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    match flat.char_indices().nth(chars) {
        Some((i, _)) => format!("{}...", &flat[..i]),
        None => flat,
    }
}

fn hit_json(h: &SearchHit) -> Value {
    json!({
        "id": h.entry.id,
        "score": h.score,
        "rank": h.rank,
        "source": h.entry.meta.source_doc,
        "char_span": h.entry.meta.char_span,
        "text": h.entry.text,
    })
}

fn print_sources(hits: &[SearchHit]) {
    if hits.is_empty() {
        outln!("  (no sources: the index is empty)");
    }
    for h in hits {
        outln!(
            "  [{}] {:.6}  {}  {}",
            h.rank,
            h.score,
            h.entry.meta.source_doc,
            excerpt(&h.entry.text, 100)
        );
    }
}

fn search(dir: &Path, query: &str, k: usize, embedder: EmbedderKind, output: Output) -> CliResult {
    if k == 0 {
        return Err(user("k must be at least 1"));
    }
    if query.trim().is_empty() {
        return Err(user("query is empty"));
    }
    let idx = open_existing(dir)?;
    let embedder = embedder_for(embedder, &idx, medrag_core::DEFAULT_EMBED_DIM)?;
    let hits = idx.search(&embedder.embed(query)?, k)?;
    match output {
        Output::Json => {
            print_json(&json!({ "hits": hits.iter().map(hit_json).collect::<Vec<_>>() }))
        }
        Output::Text => print_sources(&hits),
    }
    Ok(())
}

fn build_generator(args: &GeneratorArgs) -> CliResult<Box<dyn Generator>> {
    match args.generator {
        GeneratorKind::Remote => Ok(Box::new(RemoteChat::from_env()?)),
        GeneratorKind::Stub => {
            let mode = match args.stub_mode {
                StubKind::Extract => StubMode::extract_with_default_fallback(),
                StubKind::Echo => StubMode::EchoQuery,
                StubKind::Fixed => StubMode::FixedText(
                    args.fixed_text
                        .clone()
                        .ok_or_else(|| user("--stub-mode fixed needs --fixed-text"))?,
                ),
            };
            Ok(Box::new(StubGenerator::new(mode)))
        }
    }
}

fn session_config(args: &GeneratorArgs) -> CliResult<SessionConfig> {
    let system_text = match &args.system_prompt {
        Some(p) => load_system_prompt(p).map_err(|e| user(format!("{}: {e}", p.display())))?,
        None => DEFAULT_SYSTEM_PROMPT.to_string(),
    };
    let config = SessionConfig {
        k: args.k,
        window_units: args.window,
        reserve_units: args.reserve,
        system_text,
        generator: match args.generator {
            GeneratorKind::Stub => "stub".into(),
            GeneratorKind::Remote => "remote".into(),
        },
    };
    new_session_from(config.clone(), SessionOverrides::default())?;
    Ok(config)
}

fn params_for(args: &GeneratorArgs) -> GenerationParams {
    GenerationParams {
        max_output_units: args.reserve,
        ..GenerationParams::default()
    }
}

fn chat(dir: &Path, args: &GeneratorArgs, embedder: EmbedderKind, output: Output) -> CliResult {
    let idx = open_existing(dir)?;
    let embedder = embedder_for(embedder, &idx, medrag_core::DEFAULT_EMBED_DIM)?;
    let generator = build_generator(args)?;
    let mut session = new_session_from(session_config(args)?, SessionOverrides::default())?;
    let params = params_for(args);

    if output == Output::Text {
        outln!("{DISCLAIMER}");
        outln!(
            "{} chunks indexed. One question per line; end with EOF or /quit.",
            idx.len()
        );
    }
    let stdin = std::io::stdin();
    let mut turn = 0;
    for line in stdin.lock().lines() {
        let line = line.map_err(internal)?;
        let query = line.trim();
        if query.is_empty() {
            continue;
        }
        if query == "/quit" {
            break;
        }
        turn += 1;
        let result = match answer(
            query,
            &mut session,
            &idx,
            embedder.as_ref(),
            generator.as_ref(),
            &params,
        ) {
            Ok(r) => r,
            Err(e) => match CliError::from(e) {
                CliError::User(m) => {
                    eprintln!("error: {m}");
                    continue;
                }
                fatal => return Err(fatal),
            },
        };
        match output {
            Output::Json => outln!(
                "{}",
                json!({
                    "turn": turn,
                    "query": query,
                    "reply": result.reply,
                    "sources": result.sources.iter().map(hit_json).collect::<Vec<_>>(),
                    "included_chunk_count": result.included_chunk_count,
                    "no_context_flag": result.no_context_flag,
                    "prompt_token_estimate": result.prompt_token_estimate,
                    "disclaimer": DISCLAIMER,
                })
            ),
            Output::Text => {
                outln!("{}", result.reply);
                outln!("Sources:");
                print_sources(&result.sources);
                outln!();
            }
        }
        std::io::stdout().flush().map_err(internal)?;
    }
    Ok(())
}

struct EvalArgs {
    dataset: PathBuf,
    systems: Vec<SystemKind>,
    index: Option<PathBuf>,
    gen: GeneratorArgs,
    embedder: EmbedderKind,
    names: Vec<String>,
    report_dir: Option<PathBuf>,
    jobs: usize,
    rouge: RougeKind,
    bleu_smoothing: SmoothingKind,
    output: Output,
}

fn eval(args: EvalArgs) -> CliResult {
    if args.jobs == 0 {
        return Err(user("--jobs must be at least 1"));
    }
    if !args.names.is_empty() && args.names.len() != args.systems.len() {
        return Err(user("give one --name per --system"));
    }
    let items = load_dataset(&args.dataset)?;
    let config = MetricConfig {
        rouge: match args.rouge {
            RougeKind::L => RougeVariant::L,
            RougeKind::One => RougeVariant::N(1),
            RougeKind::Two => RougeVariant::N(2),
        },
        bleu: BleuConfig {
            smoothing: match args.bleu_smoothing {
                SmoothingKind::None => Smoothing::None,
                SmoothingKind::AddEpsilon => Smoothing::AddEpsilon,
            },
            ..BleuConfig::default()
        },
        jobs: args.jobs,
        ..MetricConfig::default()
    };

    let mut reports: Vec<MetricReport> = Vec::new();
    for (i, system) in args.systems.iter().enumerate() {
        let default_name = match system {
            SystemKind::Echo => "echo",
            SystemKind::Rag => "rag",
            SystemKind::Fixed => "fixed",
        };
        let name = args
            .names
            .get(i)
            .map(String::as_str)
            .unwrap_or(default_name);
        let report = match system {
            SystemKind::Echo => run_eval(name, &items, |it| Ok(it.reference.clone()), &config)?,
            SystemKind::Fixed => {
                let text = args
                    .gen
                    .fixed_text
                    .clone()
                    .ok_or_else(|| user("--system fixed needs --fixed-text"))?;
                run_eval(name, &items, |_| Ok(text.clone()), &config)?
            }
            SystemKind::Rag => {
                let dir = args
                    .index
                    .as_deref()
                    .ok_or_else(|| user("--system rag needs --index"))?;
                let idx = open_existing(dir)?;
                let embedder = embedder_for(args.embedder, &idx, medrag_core::DEFAULT_EMBED_DIM)?;
                let generator = build_generator(&args.gen)?;
                let base = session_config(&args.gen)?;
                let params = params_for(&args.gen);
                run_eval(
                    name,
                    &items,
                    |it| {
                        answer_once(
                            &it.query,
                            &base,
                            &idx,
                            embedder.as_ref(),
                            generator.as_ref(),
                            &params,
                        )
                        .map(|a| a.reply)
                        .map_err(|e| e.to_string())
                    },
                    &config,
                )?
            }
        };
        reports.push(report);
    }

    let chart = export_chart_data(&reports)?;
    let report_dir = args
        .report_dir
        .unwrap_or_else(|| PathBuf::from("medrag-reports"));
    let manifest = write_report_dir(&report_dir, &reports)?;
    match args.output {
        Output::Json => print_json(&json!({
            "report_dir": report_dir,
            "files": manifest.files.iter().map(|f| &f.path).collect::<Vec<_>>(),
            "reports": reports,
            "chart": chart,
        })),
        Output::Text => {
            for r in &reports {
                outln!(
                    "{}: {} items, {} scored, {} excluded ({})",
                    r.system_name,
                    r.item_count,
                    r.scored_count,
                    r.excluded_count,
                    r.rouge_variant
                );
            }
            outln!();
            out!("{}", render_summary_markdown(&reports));
            outln!();
            outln!("reports written to {}", report_dir.display());
        }
    }
    Ok(())
}

fn serve(config: Option<&Path>) -> CliResult {
    use medrag_service::{ServiceConfig, ServiceError};
    let config = match config {
        Some(p) => ServiceConfig::load(p).map_err(user)?,
        None => ServiceConfig::default(),
    };
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(internal)?;
    runtime
        .block_on(medrag_service::serve(config))
        .map_err(|e| match e {
            ServiceError::Config(_) | ServiceError::IndexLoad(_) | ServiceError::Bind { .. } => {
                user(e)
            }
            _ => internal(e),
        })
}

fn selftest(seed: u64, output: Output) -> CliResult {
    let r = kernels_selftest(seed);
    let checks = [
        (
            "lora fresh-init forward max abs error",
            r.fresh_forward_max_abs_err,
            1e-15,
        ),
        (
            "lora merge/forward max relative error",
            r.merge_forward_max_rel_err,
            1e-12,
        ),
        ("lora gradient max relative error", r.grad_max_rel_err, 1e-4),
        (
            "rope paired-rotation norm max abs error",
            r.rope_norm_max_abs_err,
            1e-12,
        ),
        (
            "rope relative-shift max abs error",
            r.rope_shift_max_abs_err,
            1e-9,
        ),
    ];
    let strict = |name: &str, v: f64, limit: f64| {
        if name.contains("gradient") {
            v < limit
        } else {
            v <= limit
        }
    };
    let all_ok =
        checks.iter().all(|(n, v, l)| strict(n, *v, *l)) && r.rope_paper_position_zero_exact;
    match output {
        Output::Json => print_json(&json!({ "seed": seed, "report": r, "pass": all_ok })),
        Output::Text => {
            for (name, v, limit) in checks {
                let verdict = if strict(name, v, limit) {
                    "PASS"
                } else {
                    "FAIL"
                };
                outln!("{name}: {v:.3e} (limit {limit:.0e}) {verdict}");
            }
            let verdict = if r.rope_paper_position_zero_exact {
                "PASS"
            } else {
                "FAIL"
            };
            outln!(
                "rope paper-literal position-0 identities exact: {} {verdict}",
                r.rope_paper_position_zero_exact
            );
        }
    }
    if all_ok {
        Ok(())
    } else {
        Err(internal("kernel self-test failed"))
    }
}
