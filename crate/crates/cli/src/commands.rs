use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use rfc2cpsa_core::corpus::{build_dataset, export_jsonl, parse_manifest, CorpusError};
use rfc2cpsa_core::eval::{evaluate, load_outputs, load_references, render_report, ReportFormat};
use rfc2cpsa_core::gateway::{ChatClient, GatewayConfig, HttpClient, RecordReplayClient, ReplayMode};
use rfc2cpsa_core::pipeline::{prepare, PrepareError, PrepareOptions};
use rfc2cpsa_core::postprocess::{
    feedback_loop, BestCandidate, CandidateModel, FormKind, LoopConfig, LoopOutcome, ProcessConfig, RoundLog,
};
use rfc2cpsa_core::prompt::{GenerationParams, PromptConfig, Query, QueryLimits};
use rfc2cpsa_core::sexpr::{parse, print_document};
use rfc2cpsa_core::validate::check_text;
use serde::Serialize;
use tracing::{info, warn};

use crate::exit;
use crate::{DatasetBuildArgs, EvalArgs, FmtArgs, FormatArg, LintArgs, TranslateArgs};

pub const CANDIDATE_FILE: &str = "candidate.scm";
pub const REPORT_FILE: &str = "report.json";
pub const ROUNDS_FILE: &str = "rounds.json";

fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

#[derive(Debug, Clone, Serialize)]
pub struct CpsaOutcome {
    pub exit_code: Option<i32>,
    pub accepted: bool,
    /// First stderr line when CPSA complained.
    pub message: Option<String>,
}

/// Runs a CPSA executable on `file`; a zero exit status means accepted.
fn run_cpsa(bin: &Path, file: &Path) -> CpsaOutcome {
    match Command::new(bin).arg(file).output() {
        Ok(out) => {
            let stderr = String::from_utf8_lossy(&out.stderr);
            CpsaOutcome {
                exit_code: out.status.code(),
                accepted: out.status.success(),
                message: stderr.lines().find(|l| !l.trim().is_empty()).map(str::to_string),
            }
        }
        Err(e) => CpsaOutcome { exit_code: None, accepted: false, message: Some(format!("cannot run CPSA: {e}")) },
    }
}

#[derive(Debug, Serialize)]
struct TranslateReport {
    status: &'static str,
    exit_code: u8,
    query: String,
    exemplars: Vec<String>,
    prompt_warnings: Vec<String>,
    model: String,
    mode: ReplayMode,
    rounds: usize,
    best: Option<BestCandidate>,
    /// Skeletons from the best round that validate against the best protocol
    /// and are appended to the candidate file.
    companion_skeletons: usize,
    candidate_file: Option<&'static str>,
    notes: Vec<String>,
    gateway_error: Option<String>,
    cpsa: Option<CpsaOutcome>,
}

/// Best candidate text plus any valid skeletons for it from the same round.
fn candidate_file_text(best: &BestCandidate, rounds: &[RoundLog]) -> (String, usize) {
    let mut forms = vec![best.candidate.cpsa_text.clone()];
    if let Some(CandidateModel::Protocol(p)) = &best.candidate.model {
        if let Some(r) = rounds.iter().find(|r| r.round == best.round) {
            for c in &r.output.candidates {
                let same = matches!(&c.model, Some(CandidateModel::Skeleton(s)) if s.protocol_name == p.name);
                if c.kind == FormKind::Skeleton && c.validate_ok && same {
                    forms.push(c.cpsa_text.clone());
                }
            }
        }
    }
    let n = forms.len() - 1;
    (forms.join("\n\n") + "\n", n)
}

pub fn translate(a: TranslateArgs) -> u8 {
    let text = match (&a.query, &a.query_file) {
        (Some(q), _) => q.clone(),
        (None, Some(p)) => match fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read query file {}: {e}", p.display());
                return exit::IO;
            }
        },
        (None, None) => unreachable!("clap requires one input"),
    };
    let opts = PrepareOptions {
        query: Query::freeform(text),
        limits: QueryLimits::default(),
        exemplars: a.exemplars.clone(),
        k: a.k,
        prompt: PromptConfig {
            context_budget: a.context_budget,
            params: GenerationParams { temperature: a.temperature, max_tokens: a.max_tokens },
        },
    };
    let prepared = match prepare(&opts) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return match e {
                PrepareError::Store(_) | PrepareError::Dataset(_) => exit::IO,
                _ => exit::USAGE,
            };
        }
    };
    for w in &prepared.bundle.warnings {
        warn!("{w}");
    }

    let mode: ReplayMode = a.mode.into();
    let gateway = GatewayConfig {
        endpoint_url: a.endpoint.clone(),
        api_key_env_name: a.api_key_env.clone(),
        timeout_ms: a.timeout_ms,
        max_retries: a.max_retries,
        retry_backoff_ms: a.retry_backoff_ms,
    };
    let client: Box<dyn ChatClient> = match (mode, &a.fixtures) {
        (ReplayMode::Live, _) => Box::new(HttpClient::new(gateway)),
        (_, None) => {
            eprintln!("error: --fixtures is required with --mode record or --mode replay");
            return exit::USAGE;
        }
        (ReplayMode::Record, Some(dir)) => {
            Box::new(RecordReplayClient::new(ReplayMode::Record, dir, Some(Box::new(HttpClient::new(gateway)))))
        }
        (ReplayMode::Replay, Some(dir)) => Box::new(RecordReplayClient::replay(dir)),
    };

    if let Err(e) = fs::create_dir_all(&a.out) {
        eprintln!("error: cannot create {}: {e}", a.out.display());
        return exit::IO;
    }
    let loop_cfg = LoopConfig {
        model_id: a.model.clone(),
        max_rounds: a.max_rounds,
        params: prepared.bundle.generation_params,
        process: ProcessConfig { max_repair_parens: a.max_repair_parens },
    };
    let (outcome, gateway_error) = match feedback_loop(client.as_ref(), &prepared.bundle.messages(), &loop_cfg) {
        Ok(o) => (o, None),
        Err(e) => {
            eprintln!("error: gateway failure in {e}");
            (LoopOutcome { best: None, rounds: e.rounds.clone() }, Some(e.to_string()))
        }
    };

    let candidate_path = a.out.join(CANDIDATE_FILE);
    let mut companion_skeletons = 0;
    let mut candidate_file = None;
    let mut cpsa = None;
    if let Some(best) = &outcome.best {
        let (text, n) = candidate_file_text(best, &outcome.rounds);
        companion_skeletons = n;
        if let Err(e) = write_atomic(&candidate_path, text.as_bytes()) {
            eprintln!("error: cannot write {}: {e}", candidate_path.display());
            return exit::IO;
        }
        candidate_file = Some(CANDIDATE_FILE);
        if let Some(bin) = &a.cpsa_bin {
            cpsa = Some(run_cpsa(bin, &candidate_path));
        }
    } else if candidate_path.exists() {
        // A stale candidate from an earlier run would misrepresent this one.
        let _ = fs::remove_file(&candidate_path);
    }

    let valid = outcome.best.as_ref().is_some_and(|b| b.candidate.validate_ok);
    let cpsa_ok = cpsa.as_ref().is_none_or(|c| c.accepted);
    let (status, code) = if gateway_error.is_some() {
        ("gateway_error", exit::IO)
    } else if outcome.best.is_none() {
        ("no_candidate", exit::VALIDATION)
    } else if valid && cpsa_ok {
        ("valid", exit::OK)
    } else if valid {
        ("rejected_by_cpsa", exit::VALIDATION)
    } else {
        ("invalid", exit::VALIDATION)
    };
    let notes = outcome.rounds.last().map(|r| r.output.notes.clone()).unwrap_or_default();
    let report = TranslateReport {
        status,
        exit_code: code,
        query: prepared.query.text.clone(),
        exemplars: prepared.exemplar_ids.clone(),
        prompt_warnings: prepared.bundle.warnings.clone(),
        model: a.model.clone(),
        mode,
        rounds: outcome.rounds.len(),
        best: outcome.best.clone(),
        companion_skeletons,
        candidate_file,
        notes,
        gateway_error,
        cpsa,
    };
    for (name, body) in [(REPORT_FILE, to_json(&report)), (ROUNDS_FILE, to_json(&outcome.rounds))] {
        let path = a.out.join(name);
        if let Err(e) = write_atomic(&path, body.as_bytes()) {
            eprintln!("error: cannot write {}: {e}", path.display());
            return exit::IO;
        }
    }
    match &outcome.best {
        Some(b) => {
            for line in b.candidate.render_diagnostics() {
                println!("{line}");
            }
            info!(status, rounds = outcome.rounds.len(), "translation finished");
        }
        None => println!("{status}: {}", report.notes.join("; ")),
    }
    code
}

pub fn lint(a: LintArgs) -> u8 {
    let (mut io, mut parse_fail, mut invalid) = (false, false, false);
    let many = a.paths.len() > 1;
    for path in &a.paths {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                io = true;
                continue;
            }
        };
        let check = check_text(&text);
        let lines = check.render_lines();
        if many && !lines.is_empty() {
            println!("{}:", path.display());
        }
        for l in &lines {
            println!("{l}");
        }
        if !check.parses() {
            parse_fail = true;
        } else if !check.is_clean() {
            invalid = true;
        } else if let Some(bin) = &a.cpsa_bin {
            let outcome = run_cpsa(bin, path);
            if !outcome.accepted {
                println!("error CpsaRejected {}: {}", path.display(), outcome.message.unwrap_or_default());
                invalid = true;
            }
        }
    }
    if io {
        exit::IO
    } else if parse_fail {
        exit::PARSE
    } else if invalid {
        exit::VALIDATION
    } else {
        exit::OK
    }
}

pub fn fmt(a: FmtArgs) -> u8 {
    let mut code = exit::OK;
    for path in &a.paths {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                code = code.max(exit::IO);
                continue;
            }
        };
        let forms = match parse(&text) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("{}: error {} @{}: {e}", path.display(), e.code(), e.span());
                if code == exit::OK {
                    code = exit::PARSE;
                }
                continue;
            }
        };
        let out = print_document(&forms);
        if a.write {
            if out != text {
                if let Err(e) = write_atomic(path, out.as_bytes()) {
                    eprintln!("error: cannot write {}: {e}", path.display());
                    code = code.max(exit::IO);
                }
            }
        } else {
            print!("{out}");
        }
    }
    code
}

pub fn dataset_build(a: DatasetBuildArgs) -> u8 {
    let result = fs::read_to_string(&a.pairs)
        .map_err(|e| CorpusError::Read { path: a.pairs.display().to_string(), source: e })
        .and_then(|t| parse_manifest(&t))
        .and_then(|m| build_dataset(&a.rfc_dir, &a.cpsa_dir, &m))
        .and_then(|(records, report)| export_jsonl(&records, &a.out).map(|n| (n, report)));
    match result {
        Ok((n, report)) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if n == 0 {
                eprintln!("warning: the dataset is empty");
            }
            for f in &report.validation_failures {
                eprintln!("warning: {} does not validate: {}", f.id, f.diagnostics.join("; "));
            }
            for f in &report.unparsed_files {
                eprintln!("warning: {} does not parse and was left out", f.id);
            }
            let counts: Vec<String> = report
                .counts
                .iter()
                .map(|(k, v)| {
                    format!(
                        "{}={v}",
                        serde_json::to_value(k).ok().and_then(|s| s.as_str().map(String::from)).unwrap_or_default()
                    )
                })
                .collect();
            println!("wrote {n} records ({})", counts.join(", "));
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::IO
        }
    }
}

pub fn eval(a: EvalArgs) -> u8 {
    let run = || -> Result<String, String> {
        let refs = load_references(&a.references).map_err(|e| e.to_string())?;
        let outputs = load_outputs(&a.candidates).map_err(|e| e.to_string())?;
        let report = evaluate(&outputs, &refs, &ProcessConfig { max_repair_parens: a.max_repair_parens })
            .map_err(|e| e.to_string())?;
        let format = match a.format {
            FormatArg::Json => ReportFormat::Json,
            FormatArg::Markdown => ReportFormat::Markdown,
        };
        Ok(render_report(&report, format))
    };
    match run() {
        Ok(text) => match write_atomic(&a.report, text.as_bytes()) {
            Ok(()) => {
                println!("wrote {}", display_name(&a.report));
                exit::OK
            }
            Err(e) => {
                eprintln!("error: cannot write {}: {e}", a.report.display());
                exit::IO
            }
        },
        Err(e) => {
            eprintln!("error: {e}");
            exit::IO
        }
    }
}

fn display_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| PathBuf::from(p).display().to_string())
}
