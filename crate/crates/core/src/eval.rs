//! Stage success rates and tree-edit similarity against reference protocols.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{alpha_normalize, emit_protocol_for_cpsa, Protocol};
use crate::postprocess::{process, FormKind, ProcessConfig};
use crate::sexpr::{SExpr, SExprKind};
use crate::validate::check_text;

/// Ordered labeled tree. Lists become a `()` node over their items; atoms
/// are leaves labeled with their kind so `"a"` and `a` differ.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tree {
    pub label: String,
    pub children: Vec<Tree>,
}

impl Tree {
    pub fn leaf(label: impl Into<String>) -> Tree {
        Tree { label: label.into(), children: Vec::new() }
    }

    pub fn node(label: impl Into<String>, children: Vec<Tree>) -> Tree {
        Tree { label: label.into(), children }
    }

    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Tree::size).sum::<usize>()
    }
}

pub fn tree_of(e: &SExpr) -> Tree {
    match &e.kind {
        SExprKind::Symbol(s) => Tree::leaf(format!("sym:{s}")),
        SExprKind::Str(s) => Tree::leaf(format!("str:{s}")),
        SExprKind::Int(n) => Tree::leaf(format!("int:{n}")),
        SExprKind::List(items) => Tree::node("()", items.iter().map(tree_of).collect()),
    }
}

/// Postorder view used by Zhang–Shasha.
struct Flat<'a> {
    labels: Vec<&'a str>,
    /// Postorder index of each node's leftmost leaf descendant.
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a> Flat<'a> {
    fn new(t: &'a Tree) -> Self {
        fn walk<'a>(t: &'a Tree, labels: &mut Vec<&'a str>, lml: &mut Vec<usize>) -> usize {
            let mut first_leaf = None;
            for c in &t.children {
                let l = walk(c, labels, lml);
                first_leaf.get_or_insert(l);
            }
            let me = labels.len();
            labels.push(&t.label);
            let l = first_leaf.unwrap_or(me);
            lml.push(l);
            l
        }
        let mut labels = Vec::new();
        let mut lml = Vec::new();
        walk(t, &mut labels, &mut lml);
        let mut last_with: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, &l) in lml.iter().enumerate() {
            last_with.insert(l, i);
        }
        let mut keyroots: Vec<usize> = last_with.into_values().collect();
        keyroots.sort_unstable();
        Flat { labels, lml, keyroots }
    }
}

/// Unit-cost ordered tree edit distance (insert, delete, relabel).
pub fn ted(a: &Tree, b: &Tree) -> usize {
    let (fa, fb) = (Flat::new(a), Flat::new(b));
    let (na, nb) = (fa.labels.len(), fb.labels.len());
    let mut td = vec![vec![0usize; nb]; na];
    for &i in &fa.keyroots {
        for &j in &fb.keyroots {
            let (li, lj) = (fa.lml[i], fb.lml[j]);
            let (m, n) = (i - li + 2, j - lj + 2);
            let mut fd = vec![vec![0usize; n]; m];
            for x in 1..m {
                fd[x][0] = fd[x - 1][0] + 1;
            }
            for y in 1..n {
                fd[0][y] = fd[0][y - 1] + 1;
            }
            for x in 1..m {
                for y in 1..n {
                    let (i1, j1) = (li + x - 1, lj + y - 1);
                    let del = fd[x - 1][y] + 1;
                    let ins = fd[x][y - 1] + 1;
                    if fa.lml[i1] == li && fb.lml[j1] == lj {
                        let relabel = fd[x - 1][y - 1] + usize::from(fa.labels[i1] != fb.labels[j1]);
                        fd[x][y] = del.min(ins).min(relabel);
                        td[i1][j1] = fd[x][y];
                    } else {
                        let (p, q) = (fa.lml[i1] - li, fb.lml[j1] - lj);
                        fd[x][y] = del.min(ins).min(fd[p][q] + td[i1][j1]);
                    }
                }
            }
        }
    }
    td[na - 1][nb - 1]
}

/// `1 - ted / max(size)`, floored at 0. The distance can exceed the larger
/// size, e.g. a deep chain against a wide star of the same size.
pub fn tree_similarity(a: &Tree, b: &Tree) -> f64 {
    let max = a.size().max(b.size());
    (1.0 - ted(a, b) as f64 / max as f64).max(0.0)
}

/// Similarity of two protocols after alpha-normalization and canonical emit.
/// The algebra is always emitted, so an inferred one matches a written one.
pub fn similarity(a: &Protocol, b: &Protocol) -> f64 {
    let ta = tree_of(&emit_protocol_for_cpsa(&alpha_normalize(a)));
    let tb = tree_of(&emit_protocol_for_cpsa(&alpha_normalize(b)));
    tree_similarity(&ta, &tb)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("output id {0} occurs twice")]
    DuplicateCandidateId(String),
    #[error("reference {file} is not a clean CPSA file: {reason}")]
    ReferenceParseFailure { file: String, reason: String },
    #[error("reference protocol {0} is defined twice")]
    DuplicateReference(String),
    #[error("nothing to evaluate: no outputs given")]
    Empty,
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
}

/// One raw model response to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawOutput {
    pub id: String,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub candidate_id: String,
    pub extraction_ok: bool,
    pub parse_ok: bool,
    pub lower_ok: bool,
    pub validate_ok: bool,
    pub similarity: Option<f64>,
    pub reference: Option<String>,
    pub repair_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTotal {
    pub count: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub extraction: StageTotal,
    pub parse: StageTotal,
    pub lower: StageTotal,
    pub validate: StageTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub scored: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub candidate_count: usize,
    pub totals: Totals,
    pub similarity: SimilarityStats,
    pub rows: Vec<CandidateScore>,
}

/// Loads reference protocols keyed by name. Every file must be clean.
pub fn load_references(dir: &Path) -> Result<BTreeMap<String, Protocol>, EvalError> {
    let read_err = |e: std::io::Error| EvalError::Read { path: dir.display().to_string(), reason: e.to_string() };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(read_err)? {
        let path = entry.map_err(read_err)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("scm") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut out = BTreeMap::new();
    for path in paths {
        let file = path.display().to_string();
        let text =
            fs::read_to_string(&path).map_err(|e| EvalError::Read { path: file.clone(), reason: e.to_string() })?;
        let check = check_text(&text);
        if !check.is_clean() {
            let reason = check.render_lines().into_iter().find(|l| l.starts_with("error")).unwrap_or_default();
            return Err(EvalError::ReferenceParseFailure { file, reason });
        }
        for p in check.document.expect("clean implies lowered").protocols {
            let name = p.name.clone();
            if out.insert(name.clone(), p).is_some() {
                return Err(EvalError::DuplicateReference(name));
            }
        }
    }
    Ok(out)
}

/// Loads raw outputs from `dir`. A directory holding `rounds.json` (a
/// translate output directory) contributes the content of its last round;
/// other `.scm`, `.txt` and `.md` files contribute their text. Ids are
/// directory names or file stems.
pub fn load_outputs(dir: &Path) -> Result<Vec<RawOutput>, EvalError> {
    let read_err =
        |p: &Path, e: &dyn std::fmt::Display| EvalError::Read { path: p.display().to_string(), reason: e.to_string() };
    let rounds_content = |p: &Path| -> Result<String, EvalError> {
        let text = fs::read_to_string(p).map_err(|e| read_err(p, &e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| read_err(p, &e))?;
        Ok(v.as_array()
            .and_then(|a| a.last())
            .and_then(|r| r.get("content"))
            .and_then(|c| c.as_str())
            .unwrap_or("")
            .to_string())
    };
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join("rounds.json").is_file() {
        return Ok(vec![RawOutput { id: name(dir), raw: rounds_content(&dir.join("rounds.json"))? }]);
    }
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| read_err(dir, &e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(|e| read_err(dir, &e))?;
    entries.sort();
    let mut out = Vec::new();
    for p in entries {
        if p.is_dir() && p.join("rounds.json").is_file() {
            out.push(RawOutput { id: name(&p), raw: rounds_content(&p.join("rounds.json"))? });
        } else if p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("scm" | "txt" | "md")) {
            let raw = fs::read_to_string(&p).map_err(|e| read_err(&p, &e))?;
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push(RawOutput { id, raw });
        }
    }
    Ok(out)
}

fn stage(count: usize, total: usize) -> StageTotal {
    StageTotal { count, rate: count as f64 / total as f64 }
}

/// Scores every candidate of every output. An output with no candidates
/// becomes one failing row so it still weighs on the rates.
pub fn evaluate(
    outputs: &[RawOutput],
    references: &BTreeMap<String, Protocol>,
    cfg: &ProcessConfig,
) -> Result<EvalReport, EvalError> {
    let mut seen = BTreeSet::new();
    for o in outputs {
        if !seen.insert(o.id.as_str()) {
            return Err(EvalError::DuplicateCandidateId(o.id.clone()));
        }
    }
    let mut rows = Vec::new();
    for o in outputs {
        let processed = process(&o.raw, cfg);
        if processed.candidates.is_empty() {
            rows.push(CandidateScore {
                candidate_id: o.id.clone(),
                extraction_ok: false,
                parse_ok: false,
                lower_ok: false,
                validate_ok: false,
                similarity: None,
                reference: None,
                repair_count: 0,
            });
            continue;
        }
        let many = processed.candidates.len() > 1;
        for (i, c) in processed.candidates.iter().enumerate() {
            let candidate_id = if many { format!("{}#{}", o.id, i + 1) } else { o.id.clone() };
            let proto = c.model.as_ref().and_then(|m| m.protocol()).filter(|_| c.kind == FormKind::Protocol);
            let matched = proto.and_then(|p| references.get(&p.name).map(|r| (p, r)));
            rows.push(CandidateScore {
                candidate_id,
                extraction_ok: true,
                parse_ok: c.parse_ok,
                lower_ok: c.lower_ok,
                validate_ok: c.validate_ok,
                similarity: matched.map(|(p, r)| similarity(p, r)),
                reference: matched.map(|(_, r)| r.name.clone()),
                repair_count: c.repairs.len(),
            });
        }
    }
    if rows.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = rows.len();
    let count = |f: fn(&CandidateScore) -> bool| rows.iter().filter(|r| f(r)).count();
    let totals = Totals {
        extraction: stage(count(|r| r.extraction_ok), n),
        parse: stage(count(|r| r.parse_ok), n),
        lower: stage(count(|r| r.lower_ok), n),
        validate: stage(count(|r| r.validate_ok), n),
    };
    let mut sims: Vec<f64> = rows.iter().filter_map(|r| r.similarity).collect();
    sims.sort_by(f64::total_cmp);
    let similarity = SimilarityStats {
        scored: sims.len(),
        mean: (!sims.is_empty()).then(|| sims.iter().sum::<f64>() / sims.len() as f64),
        median: (!sims.is_empty()).then(|| {
            let m = sims.len() / 2;
            if sims.len() % 2 == 1 {
                sims[m]
            } else {
                (sims[m - 1] + sims[m]) / 2.0
            }
        }),
    };
    Ok(EvalReport { candidate_count: n, totals, similarity, rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Markdown,
}

fn opt3(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"))
}

fn yes(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

pub fn render_report(r: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(r).expect("report serializes") + "\n",
        ReportFormat::Markdown => {
            let mut s = String::from("# Evaluation report\n\n| stage | count | rate |\n|---|---:|---:|\n");
            for (name, t) in [
                ("extraction", &r.totals.extraction),
                ("parse", &r.totals.parse),
                ("lower", &r.totals.lower),
                ("validate", &r.totals.validate),
            ] {
                let _ = writeln!(s, "| {name} | {}/{} | {:.3} |", t.count, r.candidate_count, t.rate);
            }
            let _ = writeln!(
                s,
                "\nSimilarity over {} scored candidates: mean {}, median {}\n",
                r.similarity.scored,
                opt3(r.similarity.mean),
                opt3(r.similarity.median)
            );
            s.push_str("| candidate | extraction | parse | lower | validate | repairs | reference | similarity |\n");
            s.push_str("|---|---|---|---|---|---:|---|---:|\n");
            for row in &r.rows {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} | {} |",
                    row.candidate_id,
                    yes(row.extraction_ok),
                    yes(row.parse_ok),
                    yes(row.lower_ok),
                    yes(row.validate_ok),
                    row.repair_count,
                    row.reference.as_deref().unwrap_or("-"),
                    opt3(row.similarity)
                );
            }
            s
        }
    }
}
