//! Turns raw model output into checked CPSA candidates: extraction of
//! definition forms, bounded parenthesis repair, then parse, lower and
//! validate per candidate. `feedback_loop` re-prompts with diagnostics.

use std::cmp::Reverse;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::gateway::{ChatClient, ChatMessage, ChatRole, CompletionRequest, FinishReason, GatewayError};
use crate::model::{
    emit_protocol_for_cpsa, emit_skeleton, lower_protocol, lower_skeleton, LowerDiagnostic, Protocol, Skeleton,
};
use crate::prompt::GenerationParams;
use crate::sexpr::{balance_info, parse, print_canonical, Severity, Span};
use crate::validate::{missing_protocol, validate_protocol, validate_skeleton, ValidationDiagnostic};

pub const DEFAULT_MAX_REPAIR_PARENS: usize = 4;
pub const NO_SEXPR_NOTE: &str = "no s-expression found";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum RepairKind {
    StripFence,
    StripProse,
    AppendCloseParens { count: usize },
    DropTrailingGarbage { count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAction {
    #[serde(flatten)]
    pub kind: RepairKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedSpan {
    pub span: Span,
    /// The span came from inside a fenced code block.
    pub fenced: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Extraction {
    pub spans: Vec<ExtractedSpan>,
    /// StripFence and StripProse actions in text order.
    pub actions: Vec<RepairAction>,
}

const DEF_HEADS: [&str; 2] = ["(defprotocol", "(defskeleton"];

fn def_start_at(text: &str, i: usize) -> bool {
    DEF_HEADS.iter().any(|h| {
        text[i..].starts_with(h)
            && text[i + h.len()..].chars().next().is_none_or(|c| c.is_whitespace() || c == '(' || c == ')')
    })
}

fn next_def_start(text: &str, from: usize, limit: usize) -> Option<usize> {
    let mut i = from;
    while let Some(off) = text[i..limit].find('(') {
        i += off;
        if def_start_at(&text[..limit], i) {
            return Some(i);
        }
        i += 1;
    }
    None
}

/// Line at `i` would end a still-open form: it starts at column 0 with
/// something that cannot continue an s-expression.
fn is_prose_line(text: &str, i: usize, limit: usize) -> bool {
    let line = text[i..limit].lines().next().unwrap_or("");
    match line.chars().next() {
        Some(c) => !(c.is_whitespace() || c == '(' || c == ')' || c == ';'),
        None => false,
    }
}

/// End (exclusive) of the form starting at `start`: its closing paren, or
/// where an unbalanced form has to stop.
fn scan_form(text: &str, start: usize, limit: usize) -> usize {
    let bytes = text.as_bytes();
    let mut depth = 0i64;
    let mut i = start;
    while i < limit {
        match bytes[i] {
            b';' => match text[i..limit].find('\n') {
                Some(off) => i += off,
                None => return limit,
            },
            b'"' => {
                i += 1;
                while i < limit && bytes[i] != b'"' {
                    i += if bytes[i] == b'\\' { 2 } else { 1 };
                }
                if i >= limit {
                    return limit;
                }
                i += 1;
                continue;
            }
            b'(' => {
                if depth > 0 && def_start_at(&text[..limit], i) {
                    return i;
                }
                depth += 1;
            }
            b')' => {
                depth -= 1;
                if depth == 0 {
                    return i + 1;
                }
            }
            b'\n' if is_prose_line(text, i + 1, limit) => return i + 1,
            _ => {}
        }
        i += 1;
    }
    limit
}

fn excerpt(s: &str) -> String {
    let first = s.trim().lines().next().unwrap_or("");
    let mut out: String = first.chars().take(60).collect();
    if first.chars().count() > 60 || s.trim().lines().count() > 1 {
        out.push_str("...");
    }
    out
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Finds every `(defprotocol` / `(defskeleton` form in raw model output.
/// Fence marker lines are dropped and act as hard boundaries; text outside
/// forms is discarded with a StripProse action per contiguous region.
pub fn extract(raw: &str) -> Extraction {
    // (byte position, action) pairs, sorted into text order at the end.
    let mut actions: Vec<(usize, RepairAction)> = Vec::new();
    let mut segments: Vec<(usize, usize, bool)> = Vec::new();
    let mut in_fence = false;
    let mut seg_start = 0;
    let mut pos = 0;
    for line in raw.split_inclusive('\n') {
        let end = pos + line.len();
        if is_fence(line) {
            if seg_start < pos {
                segments.push((seg_start, pos, in_fence));
            }
            if !in_fence {
                actions.push((pos, RepairAction { kind: RepairKind::StripFence, detail: line.trim().to_string() }));
            }
            in_fence = !in_fence;
            seg_start = end;
        }
        pos = end;
    }
    if seg_start < raw.len() {
        segments.push((seg_start, raw.len(), in_fence));
    }

    let mut spans = Vec::new();
    let mut prose = |from: usize, to: usize| {
        if !raw[from..to].trim().is_empty() {
            actions.push((from, RepairAction { kind: RepairKind::StripProse, detail: excerpt(&raw[from..to]) }));
        }
    };
    for (start, end, fenced) in segments {
        let mut cursor = start;
        while let Some(s) = next_def_start(raw, cursor, end) {
            prose(cursor, s);
            let stop = scan_form(raw, s, end);
            let trimmed = s + raw[s..stop].trim_end().len();
            spans.push(ExtractedSpan { span: Span::new(s, trimmed), fenced });
            cursor = stop;
        }
        prose(cursor, end);
    }
    actions.sort_by_key(|(p, _)| *p);
    Extraction { spans, actions: actions.into_iter().map(|(_, a)| a).collect() }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum RepairError {
    #[error("candidate does not start with '('")]
    NotAList,
    #[error("unterminated string literal at {0}")]
    UnterminatedString(Span),
    #[error("a ')' at byte {at} closes nothing while other '(' stay open")]
    InteriorImbalance { at: usize },
    #[error("paren surplus {surplus} is beyond the repair limit of {max}")]
    SurplusTooLarge { surplus: i64, max: usize },
    #[error("{count} extra ')' are not all at the end of the candidate")]
    MisplacedClosers { count: usize },
}

/// Balances a candidate by appending missing `)` or trimming surplus
/// trailing `)`. Atom text is never touched.
pub fn repair(span: &str, max_repair_parens: usize) -> Result<(String, Vec<RepairAction>), RepairError> {
    if !span.starts_with('(') {
        return Err(RepairError::NotAList);
    }
    let b = balance_info(span);
    if let Some(s) = b.unterminated_string {
        return Err(RepairError::UnterminatedString(s));
    }
    if b.unmatched_open > 0 && b.unmatched_close > 0 {
        return Err(RepairError::InteriorImbalance { at: b.first_unmatched_close.unwrap_or(0) });
    }
    let surplus = b.open_surplus;
    if surplus.unsigned_abs() as usize > max_repair_parens {
        return Err(RepairError::SurplusTooLarge { surplus, max: max_repair_parens });
    }
    match surplus {
        0 => Ok((span.to_string(), Vec::new())),
        s if s > 0 => {
            let count = s as usize;
            let mut text = span.to_string();
            let mut detail = format!("appended {count} ')'");
            if b.ends_in_comment {
                text.push('\n');
                detail.push_str(" after a newline ending the trailing comment");
            }
            text.push_str(&")".repeat(count));
            Ok((text, vec![RepairAction { kind: RepairKind::AppendCloseParens { count }, detail }]))
        }
        s => {
            let count = s.unsigned_abs() as usize;
            let mut text = span.trim_end();
            for _ in 0..count {
                text = text.strip_suffix(')').ok_or(RepairError::MisplacedClosers { count })?.trim_end();
            }
            let after = balance_info(text);
            if after.open_surplus != 0 || after.unmatched_close != 0 {
                return Err(RepairError::MisplacedClosers { count });
            }
            let detail = format!("dropped {count} trailing ')'");
            Ok((text.to_string(), vec![RepairAction { kind: RepairKind::DropTrailingGarbage { count }, detail }]))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Repair,
    Parse,
    Lower,
    Validate,
}

/// One finding from any stage. Spans are byte ranges into the candidate's
/// repaired text; loci are validator paths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: Stage,
    pub severity: Severity,
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub locus: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub span: Option<Span>,
}

impl Diagnostic {
    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    pub fn render(&self) -> String {
        match (&self.locus, &self.span) {
            (Some(l), _) => format!("{} {} {}: {}", self.severity, self.code, l, self.message),
            (None, Some(s)) => format!("{} {} @{}: {}", self.severity, self.code, s, self.message),
            (None, None) => format!("{} {}: {}", self.severity, self.code, self.message),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl From<&LowerDiagnostic> for Diagnostic {
    fn from(d: &LowerDiagnostic) -> Self {
        Diagnostic {
            stage: Stage::Lower,
            severity: d.severity,
            code: d.code.to_string(),
            message: d.message.clone(),
            locus: None,
            span: Some(d.span),
        }
    }
}

impl From<&ValidationDiagnostic> for Diagnostic {
    fn from(d: &ValidationDiagnostic) -> Self {
        Diagnostic {
            stage: Stage::Validate,
            severity: d.severity,
            code: d.code.to_string(),
            message: d.message.clone(),
            locus: Some(d.locus.to_string()),
            span: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormKind {
    Protocol,
    Skeleton,
}

/// Each candidate is one top-level form, so its model is one of the two.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateModel {
    Protocol(Protocol),
    Skeleton(Skeleton),
}

impl CandidateModel {
    pub fn protocol(&self) -> Option<&Protocol> {
        match self {
            CandidateModel::Protocol(p) => Some(p),
            CandidateModel::Skeleton(_) => None,
        }
    }

    /// Protocol name, or the protocol a skeleton refers to.
    pub fn protocol_name(&self) -> &str {
        match self {
            CandidateModel::Protocol(p) => &p.name,
            CandidateModel::Skeleton(s) => &s.protocol_name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranslationCandidate {
    pub raw_span: Span,
    pub kind: FormKind,
    pub repaired_text: String,
    pub repairs: Vec<RepairAction>,
    pub parse_ok: bool,
    pub lower_ok: bool,
    pub validate_ok: bool,
    #[serde(skip)]
    pub model: Option<CandidateModel>,
    pub diagnostics: Vec<Diagnostic>,
    /// Canonical rendering of the model when lowering succeeded (with the
    /// algebra always written), otherwise the repaired text.
    pub cpsa_text: String,
}

impl TranslationCandidate {
    pub fn error_count(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.is_error()).count()
    }

    pub fn render_diagnostics(&self) -> Vec<String> {
        self.diagnostics.iter().map(Diagnostic::render).collect()
    }

    /// Lexicographic quality key; larger is better.
    pub fn rank(&self) -> (bool, bool, bool, Reverse<usize>, bool) {
        (self.validate_ok, self.lower_ok, self.parse_ok, Reverse(self.error_count()), self.kind == FormKind::Protocol)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessConfig {
    pub max_repair_parens: usize,
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig { max_repair_parens: DEFAULT_MAX_REPAIR_PARENS }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessOutput {
    pub candidates: Vec<TranslationCandidate>,
    /// StripFence / StripProse actions from extraction.
    pub extraction: Vec<RepairAction>,
    pub notes: Vec<String>,
}

impl ProcessOutput {
    /// Index of the best candidate; the earliest wins ties.
    pub fn best_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.candidates.iter().enumerate() {
            if best.is_none_or(|b| c.rank() > self.candidates[b].rank()) {
                best = Some(i);
            }
        }
        best
    }

    pub fn best(&self) -> Option<&TranslationCandidate> {
        self.best_index().map(|i| &self.candidates[i])
    }
}

fn kind_of(text: &str) -> FormKind {
    if text.starts_with("(defskeleton") {
        FormKind::Skeleton
    } else {
        FormKind::Protocol
    }
}

fn front_end(raw: &str, ex: &ExtractedSpan, cfg: &ProcessConfig) -> TranslationCandidate {
    let span_text = &raw[ex.span.start..ex.span.end];
    let mut c = TranslationCandidate {
        raw_span: ex.span,
        kind: kind_of(span_text),
        repaired_text: span_text.to_string(),
        repairs: Vec::new(),
        parse_ok: false,
        lower_ok: false,
        validate_ok: false,
        model: None,
        diagnostics: Vec::new(),
        cpsa_text: span_text.to_string(),
    };
    match repair(span_text, cfg.max_repair_parens) {
        Ok((text, actions)) => {
            c.repaired_text = text;
            c.repairs = actions;
        }
        Err(e) => c.diagnostics.push(Diagnostic {
            stage: Stage::Repair,
            severity: Severity::Error,
            code: "RepairFailed".into(),
            message: e.to_string(),
            locus: None,
            span: None,
        }),
    }
    c.cpsa_text = c.repaired_text.clone();
    let forms = match parse(&c.repaired_text) {
        Ok(f) => f,
        Err(e) => {
            c.diagnostics.push(Diagnostic {
                stage: Stage::Parse,
                severity: Severity::Error,
                code: e.code().into(),
                message: e.to_string(),
                locus: None,
                span: Some(e.span()),
            });
            return c;
        }
    };
    c.parse_ok = true;
    let [form] = forms.as_slice() else {
        // Extraction yields exactly one form per span; anything else is a bug upstream.
        c.parse_ok = false;
        c.diagnostics.push(Diagnostic {
            stage: Stage::Parse,
            severity: Severity::Error,
            code: "NotASingleForm".into(),
            message: format!("candidate holds {} top-level forms", forms.len()),
            locus: None,
            span: None,
        });
        return c;
    };
    let lowered = match c.kind {
        FormKind::Protocol => lower_protocol(form).map(|l| (CandidateModel::Protocol(l.value), l.warnings)),
        FormKind::Skeleton => lower_skeleton(form).map(|l| (CandidateModel::Skeleton(l.value), l.warnings)),
    };
    match lowered {
        Ok((model, warnings)) => {
            c.diagnostics.extend(warnings.iter().map(Diagnostic::from));
            c.cpsa_text = match &model {
                CandidateModel::Protocol(p) => print_canonical(&emit_protocol_for_cpsa(p)),
                CandidateModel::Skeleton(s) => print_canonical(&emit_skeleton(s)),
            };
            c.lower_ok = true;
            c.model = Some(model);
        }
        Err(diags) => c.diagnostics.extend(diags.iter().map(Diagnostic::from)),
    }
    c
}

/// Runs extract, repair, parse, lower and validate over raw model output.
/// Never fails: every outcome is encoded in the candidate flags.
pub fn process(raw: &str, cfg: &ProcessConfig) -> ProcessOutput {
    let ex = extract(raw);
    let mut candidates: Vec<TranslationCandidate> = ex.spans.iter().map(|s| front_end(raw, s, cfg)).collect();
    let protocols: Vec<Protocol> =
        candidates.iter().filter_map(|c| c.model.as_ref().and_then(CandidateModel::protocol).cloned()).collect();
    for c in candidates.iter_mut().filter(|c| c.lower_ok) {
        let found = match c.model.as_ref().expect("lower_ok implies a model") {
            CandidateModel::Protocol(p) => validate_protocol(p),
            CandidateModel::Skeleton(s) => match protocols.iter().find(|p| p.name == s.protocol_name) {
                Some(p) => validate_skeleton(s, p),
                None => vec![missing_protocol(s)],
            },
        };
        c.validate_ok = !found.iter().any(ValidationDiagnostic::is_error);
        c.diagnostics.extend(found.iter().map(Diagnostic::from));
    }
    for c in &candidates {
        assert!(!c.validate_ok || c.lower_ok, "validate_ok without lower_ok");
        assert!(!c.lower_ok || c.parse_ok, "lower_ok without parse_ok");
        assert_eq!(c.model.is_some(), c.lower_ok);
    }
    let notes = if candidates.is_empty() { vec![NO_SEXPR_NOTE.to_string()] } else { Vec::new() };
    debug!(candidates = candidates.len(), "processed model output");
    ProcessOutput { candidates, extraction: ex.actions, notes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub model_id: String,
    pub max_rounds: u32,
    pub params: GenerationParams,
    pub process: ProcessConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundLog {
    pub round: u32,
    pub request_hash: String,
    pub finish_reason: FinishReason,
    pub retries: u32,
    pub content: String,
    pub output: ProcessOutput,
    pub best_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestCandidate {
    pub round: u32,
    pub index: usize,
    pub candidate: TranslationCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoopOutcome {
    pub best: Option<BestCandidate>,
    pub rounds: Vec<RoundLog>,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("round {round}: {source}")]
pub struct LoopError {
    pub round: u32,
    pub source: GatewayError,
    /// Rounds completed before the failure.
    pub rounds: Vec<RoundLog>,
}

/// The extra user message sent after a rejected round.
pub fn feedback_message(output: &ProcessOutput) -> String {
    let lines = match output.best() {
        Some(c) if !c.diagnostics.is_empty() => c.render_diagnostics(),
        Some(_) => vec!["the definition does not validate".to_string()],
        None => vec![NO_SEXPR_NOTE.to_string()],
    };
    let mut msg = String::from("Your previous answer was rejected by the checker:\n");
    for l in lines {
        msg.push_str("- ");
        msg.push_str(&l);
        msg.push('\n');
    }
    msg.push_str("Reply with the corrected CPSA definition only: one (defprotocol ...) form followed by any (defskeleton ...) forms.");
    msg
}

/// Request for one round: the base prompt, plus the previous answer and
/// the checker's feedback when this is a retry.
pub fn round_request(
    base: &[ChatMessage],
    previous: Option<(&str, &ProcessOutput)>,
    cfg: &LoopConfig,
) -> CompletionRequest {
    let mut messages = base.to_vec();
    if let Some((content, output)) = previous {
        messages.push(ChatMessage::new(ChatRole::Assistant, content));
        messages.push(ChatMessage::new(ChatRole::User, feedback_message(output)));
    }
    CompletionRequest {
        model_id: cfg.model_id.clone(),
        messages,
        temperature: cfg.params.temperature,
        max_tokens: cfg.params.max_tokens,
    }
}

/// Asks, checks and re-asks up to `max_rounds` times, stopping at the first
/// round that yields a valid candidate. Later rounds win ties.
pub fn feedback_loop(
    client: &dyn ChatClient,
    base: &[ChatMessage],
    cfg: &LoopConfig,
) -> Result<LoopOutcome, LoopError> {
    let mut rounds: Vec<RoundLog> = Vec::new();
    let mut best: Option<BestCandidate> = None;
    for round in 1..=cfg.max_rounds.max(1) {
        let previous = rounds.last().map(|r| (r.content.as_str(), &r.output));
        let req = round_request(base, previous, cfg);
        let res = match client.complete(&req) {
            Ok(r) => r,
            Err(source) => return Err(LoopError { round, source, rounds }),
        };
        let output = process(&res.content, &cfg.process);
        let best_index = output.best_index();
        if let Some(i) = best_index {
            let c = &output.candidates[i];
            if best.as_ref().is_none_or(|b| c.rank() >= b.candidate.rank()) {
                best = Some(BestCandidate { round, index: i, candidate: c.clone() });
            }
        }
        let done = output.candidates.iter().any(|c| c.validate_ok);
        info!(round, candidates = output.candidates.len(), valid = done, "round finished");
        rounds.push(RoundLog {
            round,
            request_hash: req.hash(),
            finish_reason: res.finish_reason,
            retries: res.retries,
            content: res.content,
            output,
            best_index,
        });
        if done {
            break;
        }
    }
    Ok(LoopOutcome { best, rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::CompletionResult;
    use proptest::prelude::*;
    use std::cell::RefCell;

    const LISTING1: &str = include_str!("../../../fixtures/recorded/listing1.txt");
    const LISTING2: &str = include_str!("../../../fixtures/recorded/listing2.txt");
    const DH: &str = include_str!("../../../fixtures/protocols/dh-two-role.scm");

    /// The residue left after undoing repair is the raw span itself.
    fn assert_conservative(raw: &str, c: &TranslationCandidate) {
        let original = &raw[c.raw_span.start..c.raw_span.end];
        let (longer, shorter) = if c.repaired_text.len() >= original.len() {
            (c.repaired_text.as_str(), original)
        } else {
            (original, c.repaired_text.as_str())
        };
        assert!(longer.starts_with(shorter), "{longer:?} vs {shorter:?}");
        assert!(longer[shorter.len()..].chars().all(|ch| ch == ')' || ch.is_whitespace()));
    }

    #[test]
    fn listing1_has_no_candidates() {
        let out = process(LISTING1, &ProcessConfig::default());
        assert!(out.candidates.is_empty());
        assert_eq!(out.notes, vec![NO_SEXPR_NOTE]);
        assert_eq!(out.extraction.len(), 1);
        assert_eq!(out.extraction[0].kind, RepairKind::StripProse);
    }

    #[test]
    fn listing2_is_one_repaired_valid_candidate() {
        let ex = extract(LISTING2);
        assert_eq!(ex.spans.len(), 1);
        assert_eq!(ex.spans[0].span, Span::new(0, LISTING2.trim_end().len()));
        let out = process(LISTING2, &ProcessConfig::default());
        let c = &out.candidates[0];
        assert_eq!(c.repairs.len(), 1);
        assert_eq!(c.repairs[0].kind, RepairKind::AppendCloseParens { count: 1 });
        assert!(c.parse_ok && c.lower_ok && c.validate_ok);
        assert_eq!(c.error_count(), 0);
        assert_eq!(c.diagnostics.len(), 1);
        assert_eq!(c.diagnostics[0].code, "UnusedVariable");
        assert_eq!(c.diagnostics[0].locus.as_deref(), Some("alice/vars/kh"));
        assert_conservative(LISTING2, c);
        assert!(c.cpsa_text.starts_with("(defprotocol meeting-location diffie-hellman\n"));
    }

    #[test]
    fn fenced_block_between_prose() {
        let raw = format!("Here is the protocol.\n```scheme\n{}\n```\nHope this helps!\n", DH.trim());
        let ex = extract(&raw);
        assert_eq!(ex.spans.len(), 2);
        assert!(ex.spans.iter().all(|s| s.fenced));
        let kinds: Vec<&RepairKind> = ex.actions.iter().map(|a| &a.kind).collect();
        // The leading `;` comment lines sit outside every form, so they go too.
        let prose = RepairKind::StripProse;
        assert_eq!(kinds, vec![&prose, &RepairKind::StripFence, &prose, &prose]);
        assert!(ex.actions[2].detail.starts_with("; Hand-written"));

        let one = "Sure:\n```\n(defprotocol p basic (defrole r (vars (n text)) (trace (send n))))\n```\nDone.";
        let ex = extract(one);
        assert_eq!(ex.spans.len(), 1);
        assert_eq!(ex.actions.iter().filter(|a| a.kind == RepairKind::StripProse).count(), 2);
        let out = process(&raw, &ProcessConfig::default());
        assert!(out.candidates.iter().all(|c| c.validate_ok && c.repairs.is_empty()));
    }

    #[test]
    fn truncated_form_stops_before_trailing_prose() {
        let raw = "(defprotocol p basic\n  (defrole r (vars (n text)) (trace (send n)))\nThat is all.\n";
        let ex = extract(raw);
        assert_eq!(
            &raw[ex.spans[0].span.start..ex.spans[0].span.end],
            "(defprotocol p basic\n  (defrole r (vars (n text)) (trace (send n)))"
        );
        assert_eq!(ex.actions.len(), 1);
        let out = process(raw, &ProcessConfig::default());
        assert!(out.candidates[0].validate_ok);
    }

    #[test]
    fn nested_def_start_splits() {
        let raw = "(defprotocol p basic (defrole r (vars (n text)) (trace (send n)))\n(defskeleton p (vars (n text)) (defstrand r 1 (n n)))";
        let out = process(raw, &ProcessConfig::default());
        assert_eq!(out.candidates.len(), 2);
        assert_eq!(out.candidates[0].kind, FormKind::Protocol);
        assert_eq!(out.candidates[0].repairs[0].kind, RepairKind::AppendCloseParens { count: 1 });
        assert!(out.candidates.iter().all(|c| c.validate_ok));
    }

    #[test]
    fn good_and_hopeless_candidates_are_independent() {
        let raw = format!(
            "{}\n\n(defprotocol broken ((((((a",
            DH.lines().filter(|l| !l.starts_with(';')).take(16).collect::<Vec<_>>().join("\n")
        );
        let out = process(&raw, &ProcessConfig::default());
        let flags: Vec<_> = out.candidates.iter().map(|c| (c.parse_ok, c.lower_ok, c.validate_ok)).collect();
        assert_eq!(flags, vec![(true, true, true), (false, false, false)]);
        assert_eq!(out.candidates[1].diagnostics[0].code, "RepairFailed");
        assert_eq!(out.best_index(), Some(0));
    }

    #[test]
    fn skeleton_without_protocol() {
        let out = process("(defskeleton ghost (vars (n text)) (defstrand r 1 (n n)))", &ProcessConfig::default());
        let c = &out.candidates[0];
        assert!(c.lower_ok && !c.validate_ok);
        assert_eq!(c.diagnostics[0].code, "UnknownProtocol");
    }

    #[test]
    fn repair_examples() {
        assert_eq!(repair("(defprotocol p basic)", 4).unwrap(), ("(defprotocol p basic)".to_string(), vec![]));
        assert_eq!(repair("((((((a", 4), Err(RepairError::SurplusTooLarge { surplus: 6, max: 4 }));
        let (t, a) = repair("(a (b) ; note", 4).unwrap();
        assert_eq!(t, "(a (b) ; note\n)");
        assert_eq!(a[0].kind, RepairKind::AppendCloseParens { count: 1 });
        let (t, a) = repair("(a (b)))\n ) ", 4).unwrap();
        assert_eq!(t, "(a (b))");
        assert_eq!(a[0].kind, RepairKind::DropTrailingGarbage { count: 2 });
        assert_eq!(repair("(a) b)", 4).unwrap().0, "(a) b");
        assert_eq!(repair("(a)) b", 4), Err(RepairError::MisplacedClosers { count: 1 }));
        assert_eq!(repair("(a)) (b", 4), Err(RepairError::InteriorImbalance { at: 3 }));
        assert_eq!(repair("(a \"b", 4), Err(RepairError::UnterminatedString(Span::new(3, 5))));
        assert_eq!(repair("a)", 4), Err(RepairError::NotAList));
        assert_eq!(repair("(a (b (c", 2), Err(RepairError::SurplusTooLarge { surplus: 3, max: 2 }));
        assert_eq!(repair("(a (b (c", 3).unwrap().0, "(a (b (c)))");
    }

    proptest! {
        #[test]
        fn repair_balances_truncations(cut in 1usize..DH.len()) {
            let body = &DH[DH.find("(defprotocol").unwrap()..];
            let cut = cut.min(body.len());
            if !body.is_char_boundary(cut) { return Ok(()); }
            let span = &body[..cut];
            if let Ok((text, actions)) = repair(span, 64) {
                let b = balance_info(&text);
                prop_assert_eq!(b.open_surplus, 0);
                prop_assert_eq!(b.unmatched_close, 0);
                prop_assert!(text.starts_with(span));
                prop_assert!(actions.len() <= 1);
            }
        }

        #[test]
        fn process_is_total_and_conservative(prefix in "[ -~\n]{0,40}", cut in 0usize..400, suffix in "[ -~\n]{0,40}") {
            let cut = cut.min(DH.len());
            let raw = format!("{prefix}\n{}\n{suffix}", &DH[..cut]);
            let out = process(&raw, &ProcessConfig::default());
            prop_assert_eq!(out.candidates.len(), extract(&raw).spans.len());
            prop_assert_eq!(process(&raw, &ProcessConfig::default()), out.clone());
            for c in &out.candidates {
                prop_assert!(!c.validate_ok || c.lower_ok);
                prop_assert!(!c.lower_ok || c.parse_ok);
                assert_conservative(&raw, c);
                for r in &c.repairs {
                    if let RepairKind::AppendCloseParens { count } = r.kind {
                        prop_assert!((1..=DEFAULT_MAX_REPAIR_PARENS).contains(&count));
                    }
                }
            }
        }
    }

    struct Script {
        replies: Vec<&'static str>,
        seen: RefCell<Vec<CompletionRequest>>,
    }

    impl ChatClient for Script {
        fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
            let mut seen = self.seen.borrow_mut();
            let content = self.replies.get(seen.len()).ok_or(GatewayError::FixtureMissing(req.hash()))?;
            seen.push(req.clone());
            Ok(CompletionResult {
                content: content.to_string(),
                finish_reason: FinishReason::Stop,
                latency_ms: 1,
                retries: 0,
            })
        }
    }

    fn loop_cfg(max_rounds: u32) -> LoopConfig {
        LoopConfig {
            model_id: "m".into(),
            max_rounds,
            params: GenerationParams::default(),
            process: ProcessConfig::default(),
        }
    }

    const UNDECLARED: &str = "(defprotocol p basic (defrole r (vars (n text)) (trace (send (cat n m)))))";
    const FIXED: &str = "(defprotocol p basic (defrole r (vars (n m text)) (trace (send (cat n m)))))";

    #[test]
    fn second_round_fixes_undeclared_variable() {
        let base = vec![ChatMessage::new(ChatRole::System, "s"), ChatMessage::new(ChatRole::User, "q")];
        let client = Script { replies: vec![UNDECLARED, FIXED], seen: RefCell::new(vec![]) };
        let out = feedback_loop(&client, &base, &loop_cfg(3)).unwrap();
        assert_eq!(out.rounds.len(), 2);
        let best = out.best.unwrap();
        assert_eq!((best.round, best.candidate.validate_ok), (2, true));
        let second = &client.seen.borrow()[1];
        let roles: Vec<ChatRole> = second.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, vec![ChatRole::System, ChatRole::User, ChatRole::Assistant, ChatRole::User]);
        assert_eq!(second.messages[2].content, UNDECLARED);
        assert!(second.messages[3]
            .content
            .contains("error UndeclaredVariable r/trace/0: variable m is not declared in role r"));
        assert_eq!(second.hash(), out.rounds[1].request_hash);
    }

    #[test]
    fn loop_exit_conditions() {
        let base = vec![ChatMessage::new(ChatRole::User, "q")];
        let client = Script { replies: vec![FIXED], seen: RefCell::new(vec![]) };
        assert_eq!(feedback_loop(&client, &base, &loop_cfg(3)).unwrap().rounds.len(), 1);

        let client = Script { replies: vec![UNDECLARED], seen: RefCell::new(vec![]) };
        let out = feedback_loop(&client, &base, &loop_cfg(1)).unwrap();
        assert_eq!(out.rounds.len(), 1);
        assert!(!out.best.unwrap().candidate.validate_ok);

        let client = Script { replies: vec![LISTING1], seen: RefCell::new(vec![]) };
        let err = feedback_loop(&client, &base, &loop_cfg(2)).unwrap_err();
        assert_eq!(err.round, 2);
        assert_eq!(err.rounds.len(), 1);
        assert!(client.seen.borrow()[0].messages.len() == 1);
    }
}
