//! `medrag`: ingest, index, search, chat, evaluate and serve from the command line.
//!
//! Exit codes: 0 success, 1 user error, 2 internal error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "medrag",
    version,
    about = "Retrieval-augmented medical dialogue engine and evaluation workbench"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Output {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Tagged,
    Tabular,
    /// The whole file is one plain-text document.
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorKind {
    Stub,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StubKind {
    /// First sentence of the top context chunk.
    Extract,
    /// Repeat the query.
    Echo,
    /// Always reply with `--fixed-text`.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SystemKind {
    Echo,
    Rag,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RougeKind {
    L,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SmoothingKind {
    /// Zero clipped counts give a BLEU of 0.
    None,
    AddEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupingKind {
    Exchange,
    Document,
}

#[derive(Debug, Args)]
pub struct GeneratorArgs {
    #[arg(long, value_enum, default_value = "stub")]
    pub generator: GeneratorKind,
    #[arg(long, value_enum, default_value = "extract")]
    pub stub_mode: StubKind,
    #[arg(long)]
    pub fixed_text: Option<String>,
    /// File holding the system prompt.
    #[arg(long)]
    pub system_prompt: Option<PathBuf>,
    #[arg(short, long, default_value_t = medrag_core::DEFAULT_TOP_K)]
    pub k: usize,
    #[arg(long, default_value_t = medrag_core::DEFAULT_WINDOW_UNITS)]
    pub window: usize,
    #[arg(long, default_value_t = medrag_core::DEFAULT_RESERVE_UNITS)]
    pub reserve: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a dialogue corpus and report what it holds.
    Ingest {
        path: PathBuf,
        #[arg(long, value_enum)]
        format: Option<InputFormat>,
        /// Also write the exchanges as role/content chat records (JSONL).
        #[arg(long)]
        export_chat: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        output: Output,
    },
    /// Chunk, embed and persist a corpus into an index directory.
    Index {
        path: PathBuf,
        #[arg(long, value_enum)]
        format: Option<InputFormat>,
        #[arg(long, default_value_t = medrag_core::DEFAULT_CHUNK_UNITS)]
        chunk_size: usize,
        #[arg(long, default_value_t = medrag_core::DEFAULT_CHUNK_OVERLAP)]
        chunk_overlap: usize,
        #[arg(long, default_value = "medrag-index")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "exchange")]
        grouping: GroupingKind,
        #[arg(long, value_enum, default_value = "local")]
        embedder: EmbedderKind,
        #[arg(long, default_value_t = medrag_core::DEFAULT_EMBED_DIM)]
        dim: usize,
        #[arg(long, value_enum, default_value = "text")]
        output: Output,
    },
    /// Rank indexed chunks against a query.
    Search {
        dir: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(short, long, default_value_t = medrag_core::DEFAULT_TOP_K)]
        k: usize,
        #[arg(long, value_enum, default_value = "local")]
        embedder: EmbedderKind,
        #[arg(long, value_enum, default_value = "text")]
        output: Output,
    },
    /// Chat over an index, one query per stdin line.
    Chat {
        dir: PathBuf,
        #[command(flatten)]
        gen: GeneratorArgs,
        #[arg(long, value_enum, default_value = "local")]
        embedder: EmbedderKind,
        /// `json` prints one object per turn.
        #[arg(long, value_enum, default_value = "text")]
        output: Output,
    },
    /// Score one or more systems on a query/reference dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, required = true, num_args = 1..)]
        system: Vec<SystemKind>,
        /// Index directory, needed by the `rag` system.
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        gen: GeneratorArgs,
        #[arg(long, value_enum, default_value = "local")]
        embedder: EmbedderKind,
        /// Display names, one per `--system`, in the same order.
        #[arg(long = "name")]
        names: Vec<String>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value = "l")]
        rouge: RougeKind,
        #[arg(long, value_enum, default_value = "none")]
        bleu_smoothing: SmoothingKind,
        #[arg(long, value_enum, default_value = "text")]
        output: Output,
    },
    /// Run the HTTP service.
    Serve {
        /// TOML service config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Numeric kernel checks.
    Kernels {
        #[command(subcommand)]
        action: KernelsAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum KernelsAction {
    /// LoRA gradient and merge checks plus RoPE property sweeps.
    Selftest {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value = "text")]
        output: Output,
    },
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Internal(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error: {}",
                e.message().lines().next().unwrap_or("unknown failure")
            );
            ExitCode::from(e.code())
        }
    }
}
