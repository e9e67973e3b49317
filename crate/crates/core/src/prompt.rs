//! Query gate and prompt assembly with few-shot exemplar injection.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatMessage, ChatRole};
use crate::sexpr::parse;
use crate::validate::check_text;

/// Instructions sent as the system message. Kept verbatim in the README.
pub const SYSTEM_INSTRUCTIONS: &str = "\
You translate protocol requirements into input files for the Cryptographic Protocol Shapes Analyzer (CPSA).
Answer with s-expressions only: exactly one (defprotocol ...) form followed by zero or more (defskeleton ...) forms.
Declare every variable with its sort in (vars ...), use send and recv events in each role's (trace ...), and do not write any prose.";

pub const DEFAULT_K: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    #[default]
    Freeform,
    RfcExcerpt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfcRef {
    pub rfc_number: u32,
    pub section_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub source: QuerySource,
    pub metadata: Option<RfcRef>,
}

impl Query {
    pub fn freeform(text: impl Into<String>) -> Self {
        Query { text: text.into(), source: QuerySource::Freeform, metadata: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryLimits {
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for QueryLimits {
    fn default() -> Self {
        QueryLimits { min_chars: 1, max_chars: 16_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Rejection {
    #[error("query is empty or shorter than {min} characters")]
    Empty { min: usize },
    #[error("query has {len} characters, more than the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("query is already a CPSA definition; there is nothing to translate")]
    AlreadyStructured,
    #[error("query contains a non-printable character {ch:?} at character {index}")]
    IllegalCharacters { ch: char, index: usize },
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Collapses whitespace runs to one space outside fenced code blocks;
/// fenced blocks are kept line for line.
fn normalize_whitespace(text: &str) -> String {
    let mut segments: Vec<String> = Vec::new();
    let mut prose = String::new();
    let mut in_fence = false;
    let flush = |prose: &mut String, segments: &mut Vec<String>| {
        let collapsed = prose.split_whitespace().collect::<Vec<_>>().join(" ");
        if !collapsed.is_empty() {
            segments.push(collapsed);
        }
        prose.clear();
    };
    for line in text.lines() {
        if in_fence {
            segments.push(line.trim_end().to_string());
            in_fence = !is_fence(line);
        } else if is_fence(line) {
            flush(&mut prose, &mut segments);
            segments.push(line.trim().to_string());
            in_fence = true;
        } else {
            prose.push_str(line);
            prose.push('\n');
        }
    }
    flush(&mut prose, &mut segments);
    segments.join("\n")
}

fn looks_structured(text: &str) -> bool {
    match parse(text) {
        Ok(forms) => {
            !forms.is_empty()
                && forms.iter().any(|f| f.head() == Some("defprotocol"))
                && forms.iter().all(|f| matches!(f.head(), Some("defprotocol" | "defskeleton" | "herald" | "comment")))
        }
        Err(_) => false,
    }
}

/// Gates a query before it reaches the model and normalizes its whitespace.
pub fn preprocess(q: &Query, limits: &QueryLimits) -> Result<Query, Rejection> {
    let trimmed = q.text.trim();
    if let Some((index, ch)) =
        trimmed.chars().enumerate().find(|(_, c)| (c.is_control() && !c.is_whitespace()) || *c == '\u{FFFD}')
    {
        return Err(Rejection::IllegalCharacters { ch, index });
    }
    let len = trimmed.chars().count();
    if len == 0 || len < limits.min_chars {
        return Err(Rejection::Empty { min: limits.min_chars.max(1) });
    }
    if len > limits.max_chars {
        return Err(Rejection::TooLong { len, max: limits.max_chars });
    }
    if looks_structured(trimmed) {
        return Err(Rejection::AlreadyStructured);
    }
    Ok(Query { text: normalize_whitespace(trimmed), ..q.clone() })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exemplar {
    pub id: String,
    pub requirement_text: Option<String>,
    pub cpsa_text: String,
    /// Parses, lowers and validates without errors.
    pub validated: bool,
}

impl Exemplar {
    pub fn new(id: impl Into<String>, requirement_text: Option<String>, cpsa_text: impl Into<String>) -> Self {
        let cpsa_text = cpsa_text.into();
        let validated = check_text(&cpsa_text).is_clean();
        Exemplar { id: id.into(), requirement_text, cpsa_text, validated }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot read exemplar store {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Loads `*.scm` files from `dir`, each with an optional sibling `.txt`
/// requirement. The id is the file stem. Sorted by id.
pub fn load_exemplar_store(dir: &Path) -> Result<Vec<Exemplar>, StoreError> {
    let io = |path: &Path, source| StoreError::Io { path: path.display().to_string(), source };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("scm") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let cpsa_text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        let txt = path.with_extension("txt");
        let requirement_text = if txt.exists() {
            Some(fs::read_to_string(&txt).map_err(|e| io(&txt, e))?.trim().to_string())
        } else {
            None
        };
        out.push(Exemplar::new(id, requirement_text, cpsa_text));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("the exemplar store is empty")]
    StoreEmpty,
    #[error("k = {k} exceeds the {size} exemplars available")]
    KTooLarge { k: usize, size: usize },
    #[error("k must be positive")]
    InvalidK,
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on", "or", "that", "the",
    "then", "this", "to", "with",
];

/// Lowercased alphanumeric words, minus a few stopwords.
pub fn tokens(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_ascii_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Token-overlap score between a query and an exemplar's requirement text,
/// falling back to the symbols of its CPSA text.
pub fn overlap_score(query: &str, ex: &Exemplar) -> usize {
    let q = tokens(query);
    let e = tokens(ex.requirement_text.as_deref().unwrap_or(&ex.cpsa_text));
    q.intersection(&e).count()
}

/// Picks the `k` best exemplars by overlap score (ties by id) and returns
/// them in id order, so the result is a subsequence of the id-sorted store.
pub fn select_exemplars(store: &[Exemplar], q: &Query, k: usize) -> Result<Vec<Exemplar>, SelectError> {
    if store.is_empty() {
        return Err(SelectError::StoreEmpty);
    }
    if k == 0 {
        return Err(SelectError::InvalidK);
    }
    if k > store.len() {
        return Err(SelectError::KTooLarge { k, size: store.len() });
    }
    let mut ranked: Vec<(usize, &Exemplar)> = store.iter().map(|e| (overlap_score(&q.text, e), e)).collect();
    ranked.sort_by(|(sa, a), (sb, b)| sb.cmp(sa).then_with(|| a.id.cmp(&b.id)));
    let mut chosen: Vec<Exemplar> = ranked.into_iter().take(k).map(|(_, e)| e.clone()).collect();
    chosen.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams { temperature: 0.2, max_tokens: 2048 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    /// Upper bound on the rendered prompt, in characters.
    pub context_budget: usize,
    pub params: GenerationParams,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { context_budget: 48_000, params: GenerationParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssembleError {
    #[error("the query alone renders to {needed} characters, over the context budget of {budget}")]
    QueryExceedsBudget { needed: usize, budget: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_instructions: String,
    pub exemplar_blocks: Vec<Exemplar>,
    pub user_query: String,
    pub generation_params: GenerationParams,
    pub warnings: Vec<String>,
}

fn render_exemplar(index: usize, ex: &Exemplar) -> String {
    let mut out = format!("### Example {}: {}\n", index + 1, ex.id);
    if let Some(req) = &ex.requirement_text {
        out.push_str("Requirements:\n");
        out.push_str(req.trim());
        out.push('\n');
    }
    out.push_str("CPSA definition:\n```scheme\n");
    out.push_str(ex.cpsa_text.trim());
    out.push_str("\n```\n\n");
    out
}

fn render_task(query: &str) -> String {
    format!("### Task\n{query}\n")
}

impl PromptBundle {
    /// The user message: exemplar blocks in order, then the query.
    pub fn user_message(&self) -> String {
        let mut out: String = self.exemplar_blocks.iter().enumerate().map(|(i, e)| render_exemplar(i, e)).collect();
        out.push_str(&render_task(&self.user_query));
        out
    }

    pub fn messages(&self) -> Vec<ChatMessage> {
        let mut msgs = Vec::new();
        if !self.system_instructions.is_empty() {
            msgs.push(ChatMessage { role: ChatRole::System, content: self.system_instructions.clone() });
        }
        msgs.push(ChatMessage { role: ChatRole::User, content: self.user_message() });
        msgs
    }

    /// Everything the model sees, as one text.
    pub fn render(&self) -> String {
        format!("{}\n\n{}", self.system_instructions, self.user_message())
    }
}

/// Renders the prompt. When the budget is exceeded, exemplars are dropped
/// from the tail (never the query) and a warning records how many.
pub fn assemble(q: &Query, exemplars: &[Exemplar], cfg: &PromptConfig) -> Result<PromptBundle, AssembleError> {
    let mut bundle = PromptBundle {
        system_instructions: SYSTEM_INSTRUCTIONS.to_string(),
        exemplar_blocks: exemplars.to_vec(),
        user_query: q.text.clone(),
        generation_params: cfg.params,
        warnings: Vec::new(),
    };
    let bare = PromptBundle { exemplar_blocks: Vec::new(), ..bundle.clone() }.render().chars().count();
    if bare > cfg.context_budget {
        return Err(AssembleError::QueryExceedsBudget { needed: bare, budget: cfg.context_budget });
    }
    let mut dropped = 0;
    while bundle.render().chars().count() > cfg.context_budget {
        bundle.exemplar_blocks.pop();
        dropped += 1;
    }
    if dropped > 0 {
        bundle.warnings.push(format!(
            "dropped {dropped} of {} exemplars to fit the context budget of {} characters",
            exemplars.len(),
            cfg.context_budget
        ));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    const QUERY: &str = "Using Diffie-Hellman algebra and s-expressions, define a CPSA-compatible input file for a protocol to allow Alice and Bob to exchange a meeting location.";
    const LISTING2: &str = include_str!("../../../fixtures/recorded/listing2.txt");

    fn store() -> Vec<Exemplar> {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/exemplars");
        load_exemplar_store(&dir).unwrap()
    }

    #[test]
    fn accepts_the_meeting_location_query() {
        let q = preprocess(&Query::freeform(QUERY), &QueryLimits::default()).unwrap();
        assert_eq!(q.text, QUERY);
    }

    #[test]
    fn rejections() {
        let lim = QueryLimits::default();
        assert_eq!(preprocess(&Query::freeform(""), &lim), Err(Rejection::Empty { min: 1 }));
        assert_eq!(preprocess(&Query::freeform("  \n\t "), &lim), Err(Rejection::Empty { min: 1 }));
        let repaired = format!("{})", LISTING2.trim_end());
        assert_eq!(preprocess(&Query::freeform(repaired), &lim), Err(Rejection::AlreadyStructured));
        let small = QueryLimits { min_chars: 1, max_chars: 10 };
        assert!(matches!(
            preprocess(&Query::freeform("x".repeat(11)), &small),
            Err(Rejection::TooLong { len: 11, max: 10 })
        ));
        assert!(matches!(
            preprocess(&Query::freeform("abc\u{7}def"), &lim),
            Err(Rejection::IllegalCharacters { ch: '\u{7}', index: 3 })
        ));
        // A truncated definition does not parse, so it is not rejected as structured.
        assert!(preprocess(&Query::freeform(LISTING2), &lim).is_ok());
    }

    #[test]
    fn whitespace_normalization_keeps_fences() {
        let text = "Define   a\n\nprotocol:\n```scheme\n(defrole a\n   (vars))\n```\n  then   stop ";
        let q = preprocess(&Query::freeform(text), &QueryLimits::default()).unwrap();
        assert_eq!(q.text, "Define a protocol:\n```scheme\n(defrole a\n   (vars))\n```\nthen stop");
        assert_eq!(preprocess(&q, &QueryLimits::default()).unwrap(), q);
    }

    #[test]
    fn store_loads_and_validates() {
        let s = store();
        assert_eq!(s.iter().map(|e| e.id.as_str()).collect::<Vec<_>>(), vec!["dh-meeting", "ns-basic"]);
        assert!(s.iter().all(|e| e.validated && e.requirement_text.is_some()));
    }

    #[test]
    fn selection() {
        let s = store();
        let q = Query::freeform(QUERY);
        let both = select_exemplars(&s, &q, 2).unwrap();
        assert_eq!(both, s);
        // Without requirement texts, ranking falls back to CPSA symbols; only
        // the DH exemplar spells out `diffie-hellman`.
        let bare: Vec<Exemplar> = s.iter().map(|e| Exemplar { requirement_text: None, ..e.clone() }).collect();
        let q = Query::freeform("A Diffie-Hellman agreement");
        assert_eq!(overlap_score(&q.text, &bare[0]), 2);
        assert_eq!(overlap_score(&q.text, &bare[1]), 0);
        assert_eq!(select_exemplars(&bare, &q, 1).unwrap()[0].id, "dh-meeting");
        assert_eq!(select_exemplars(&s, &q, 0), Err(SelectError::InvalidK));
        assert_eq!(select_exemplars(&s, &q, 3), Err(SelectError::KTooLarge { k: 3, size: 2 }));
        assert_eq!(select_exemplars(&[], &q, 1), Err(SelectError::StoreEmpty));
        let mut reversed = s.clone();
        reversed.reverse();
        assert_eq!(select_exemplars(&reversed, &q, 1), select_exemplars(&s, &q, 1));
    }

    #[test]
    fn assembly() {
        let q = preprocess(&Query::freeform(QUERY), &QueryLimits::default()).unwrap();
        let s = store();
        let cfg = PromptConfig::default();
        let b = assemble(&q, &s, &cfg).unwrap();
        assert_eq!(b.exemplar_blocks.len(), 2);
        let user = b.user_message();
        assert!(user.ends_with(&format!("### Task\n{QUERY}\n")));
        assert!(user.find("Example 1: dh-meeting").unwrap() < user.find("Example 2: ns-basic").unwrap());
        assert_eq!(b.messages().len(), 2);
        assert_eq!(assemble(&q, &s, &cfg).unwrap().render(), b.render());

        let zero = assemble(&q, &[], &cfg).unwrap();
        assert!(zero.exemplar_blocks.is_empty());
        assert_eq!(zero.user_message(), format!("### Task\n{QUERY}\n"));

        let tight = PromptConfig { context_budget: zero.render().len() + 10, ..cfg.clone() };
        let cut = assemble(&q, &s, &tight).unwrap();
        assert!(cut.exemplar_blocks.is_empty());
        let expected =
            format!("dropped 2 of 2 exemplars to fit the context budget of {} characters", tight.context_budget);
        assert_eq!(cut.warnings, vec![expected]);

        let tiny = PromptConfig { context_budget: 20, ..cfg };
        assert!(matches!(assemble(&q, &s, &tiny), Err(AssembleError::QueryExceedsBudget { .. })));
    }
}
