//! `rfc2cpsa`: translate, lint, format, build datasets and evaluate.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rfc2cpsa_core::gateway::{GatewayConfig, ReplayMode, DEFAULT_API_KEY_ENV};
use rfc2cpsa_core::pipeline::{DEFAULT_MAX_ROUNDS, DEFAULT_MODEL};
use rfc2cpsa_core::postprocess::DEFAULT_MAX_REPAIR_PARENS;
use tracing_subscriber::EnvFilter;

/// Exit codes shared by every subcommand.
pub mod exit {
    pub const OK: u8 = 0;
    pub const PARSE: u8 = 1;
    pub const VALIDATION: u8 = 2;
    pub const IO: u8 = 3;
    pub const USAGE: u8 = 4;
}

#[derive(Debug, Parser)]
#[command(
    name = "rfc2cpsa",
    version,
    about = "Translate protocol requirements into CPSA input files with a language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ask the model for a CPSA definition, then repair, check and report on it.
    Translate(TranslateArgs),
    /// Parse, lower and validate CPSA files without repairing them.
    Lint(LintArgs),
    /// Print CPSA files in canonical layout, or rewrite them in place.
    Fmt(FmtArgs),
    /// Build a JSONL dataset from RFC text, CPSA files and a pairs manifest.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Score model outputs: stage success rates and similarity to references.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Ingest, pair and export the dataset.
    Build(DatasetBuildArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Live,
    Record,
    Replay,
}

impl From<ModeArg> for ReplayMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Live => ReplayMode::Live,
            ModeArg::Record => ReplayMode::Record,
            ModeArg::Replay => ReplayMode::Replay,
        }
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["query", "query_file"]))]
struct TranslateArgs {
    /// Requirement text to translate.
    #[arg(long)]
    query: Option<String>,
    /// File holding the requirement text.
    #[arg(long, value_name = "PATH")]
    query_file: Option<PathBuf>,
    /// Exemplar directory (`.scm` plus optional `.txt`) or a `.jsonl` dataset.
    #[arg(long, value_name = "PATH")]
    exemplars: Option<PathBuf>,
    /// Number of exemplars to inject.
    #[arg(long, default_value_t = rfc2cpsa_core::prompt::DEFAULT_K)]
    k: usize,
    /// Chat-completion endpoint.
    #[arg(long, default_value_t = GatewayConfig::default().endpoint_url)]
    endpoint: String,
    /// Model identifier sent to the endpoint.
    #[arg(long, default_value = DEFAULT_MODEL)]
    model: String,
    /// Environment variable holding the API key.
    #[arg(long, default_value = DEFAULT_API_KEY_ENV)]
    api_key_env: String,
    /// Live calls, live calls saved to the fixture store, or fixture replay only.
    #[arg(long, value_enum, default_value_t = ModeArg::Live)]
    mode: ModeArg,
    /// Fixture store directory; required for record and replay.
    #[arg(long, value_name = "DIR")]
    fixtures: Option<PathBuf>,
    /// Maximum number of model rounds, including feedback re-prompts.
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS, value_parser = clap::value_parser!(u32).range(1..))]
    max_rounds: u32,
    #[arg(long, default_value_t = 0.2)]
    temperature: f64,
    #[arg(long, default_value_t = 2048, value_parser = clap::value_parser!(u32).range(1..))]
    max_tokens: u32,
    /// Prompt size limit in characters; exemplars are dropped to fit.
    #[arg(long, default_value_t = rfc2cpsa_core::prompt::PromptConfig::default().context_budget)]
    context_budget: usize,
    /// Largest number of ')' repair may add or remove.
    #[arg(long, default_value_t = DEFAULT_MAX_REPAIR_PARENS, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    max_repair_parens: usize,
    /// Per-request timeout in milliseconds.
    #[arg(long, default_value_t = GatewayConfig::default().timeout_ms, value_parser = clap::value_parser!(u64).range(1..))]
    timeout_ms: u64,
    #[arg(long, default_value_t = GatewayConfig::default().max_retries)]
    max_retries: u32,
    /// Base backoff in milliseconds, doubled on each retry.
    #[arg(long, default_value_t = GatewayConfig::default().retry_backoff_ms)]
    retry_backoff_ms: u64,
    /// Optional CPSA executable run on the emitted candidate.
    #[arg(long, value_name = "PATH")]
    cpsa_bin: Option<PathBuf>,
    /// Output directory for candidate.scm, report.json and rounds.json.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct LintArgs {
    #[arg(required = true, value_name = "PATH")]
    paths: Vec<PathBuf>,
    /// Optional CPSA executable run on every file that lints clean.
    #[arg(long, value_name = "PATH")]
    cpsa_bin: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FmtArgs {
    #[arg(required = true, value_name = "PATH")]
    paths: Vec<PathBuf>,
    /// Rewrite files in place instead of printing.
    #[arg(long)]
    write: bool,
}

#[derive(Debug, Args)]
struct DatasetBuildArgs {
    #[arg(long, value_name = "DIR")]
    rfc_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    cpsa_dir: PathBuf,
    /// JSON manifest: [{"rfc": N, "section": "2.1", "cpsa_file": "x.scm"}].
    #[arg(long, value_name = "MANIFEST")]
    pairs: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Json,
    Markdown,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Translate output directories, or raw `.scm`/`.txt`/`.md` responses.
    #[arg(long, value_name = "DIR")]
    candidates: PathBuf,
    /// Clean reference `.scm` files, matched to candidates by protocol name.
    #[arg(long, value_name = "DIR")]
    references: PathBuf,
    #[arg(long, value_name = "PATH")]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
    #[arg(long, default_value_t = DEFAULT_MAX_REPAIR_PARENS)]
    max_repair_parens: usize,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .without_time()
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Translate(a) => commands::translate(a),
        Command::Lint(a) => commands::lint(a),
        Command::Fmt(a) => commands::fmt(a),
        Command::Dataset { command: DatasetCommand::Build(a) } => commands::dataset_build(a),
        Command::Eval(a) => commands::eval(a),
    };
    ExitCode::from(code)
}
