//! RFC ingestion, manifest-driven pairing with CPSA files, and JSONL export.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::prompt::{Exemplar, RfcRef};
use crate::validate::check_text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub section_id: String,
    pub heading: String,
    /// Paragraphs with whitespace collapsed, separated by blank lines.
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfcDocument {
    pub rfc_number: u32,
    pub title: String,
    pub sections: Vec<Section>,
}

impl RfcDocument {
    pub fn section(&self, id: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.section_id == id)
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input is not a plain-text RFC: {0}")]
    NotPlainText(String),
    #[error("manifest refers to a missing file: {0}")]
    ManifestRefersToMissingFile(String),
    #[error("manifest refers to section {section} which RFC {rfc} does not have")]
    ManifestRefersToMissingSection { rfc: u32, section: String },
    #[error("pair {id}: {file} does not parse: {reason}")]
    PairDoesNotParse { id: String, file: String, reason: String },
    #[error("RFC {0} is ingested from more than one file")]
    DuplicateRfc(u32),
    #[error("record id {0} occurs twice")]
    DuplicateRecordId(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot write {path}: {reason}")]
    UnwritableOutput { path: String, reason: String },
    #[error("line {line}: {reason}")]
    BadJsonl { line: usize, reason: String },
}

static FOOTER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[Page \d+\]\s*$").unwrap());
static RUNNING_HEADER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^RFC \d+\s{2,}.*\S\s{2,}\S.*\d{4}\s*$").unwrap());
static HEADING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+(?:\.\d+)*)\.?\s+(\S.*?)\s*$").unwrap());
static TOC_ENTRY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\.{2,}\s*\d+\s*$").unwrap());
static RFC_FIELD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^Request for Comments:\s*(\d+)").unwrap());
static RFC_ANY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\bRFC ?(\d+)\b").unwrap());
static RFC_FILENAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)^rfc-?(\d+)").unwrap());

/// RFC number from a file name such as `rfc2409.txt`.
pub fn rfc_number_from_filename(name: &str) -> Option<u32> {
    RFC_FILENAME.captures(name).and_then(|c| c[1].parse().ok())
}

/// Removes form feeds, page footers and running headers. Text split by a
/// page break mid-paragraph is rejoined.
fn strip_pagination(raw: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut after_break = false;
    for line in raw.lines() {
        let line = line.replace('\x0c', "");
        let line = line.trim_end();
        if FOOTER.is_match(line) {
            after_break = true;
            continue;
        }
        if RUNNING_HEADER.is_match(line) && (after_break || out.iter().any(|l| !l.is_empty())) {
            after_break = true;
            continue;
        }
        if after_break {
            if line.is_empty() {
                continue;
            }
            while out.last().is_some_and(|l| l.is_empty()) {
                out.pop();
            }
            let ends_sentence = out.last().is_none_or(|l| l.ends_with(['.', ':', ';']));
            if ends_sentence || HEADING.is_match(line) {
                out.push(String::new());
            }
            after_break = false;
        }
        out.push(line.to_string());
    }
    out
}

fn paragraphs(lines: &[String]) -> String {
    let mut paras: Vec<String> = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for l in lines.iter().chain(std::iter::once(&String::new())) {
        if l.trim().is_empty() {
            if !cur.is_empty() {
                paras.push(cur.join(" ").split_whitespace().collect::<Vec<_>>().join(" "));
                cur.clear();
            }
        } else {
            cur.push(l);
        }
    }
    paras.join("\n\n")
}

fn find_title(preamble: &[String]) -> Option<String> {
    // The title is the first centered line after the header block.
    let first_blank = preamble.iter().position(|l| l.is_empty())?;
    preamble[first_blank..]
        .iter()
        .find(|l| l.starts_with("          ") && !l.trim().is_empty())
        .map(|l| l.trim().to_string())
}

/// Splits a plain-text RFC into numbered sections. `fallback_number` is used
/// when the text itself does not name its RFC number. Returns warnings too.
pub fn ingest_rfc(raw: &str, fallback_number: Option<u32>) -> Result<(RfcDocument, Vec<String>), CorpusError> {
    if raw.trim().is_empty() {
        return Err(CorpusError::NotPlainText("empty input".into()));
    }
    if raw.contains('\0') || raw.trim_start().starts_with('<') {
        return Err(CorpusError::NotPlainText("binary or markup content".into()));
    }
    let rfc_number = RFC_FIELD
        .captures(raw)
        .or_else(|| RFC_ANY.captures(raw))
        .and_then(|c| c[1].parse().ok())
        .or(fallback_number)
        .ok_or_else(|| CorpusError::NotPlainText("no RFC number found".into()))?;

    let lines = strip_pagination(raw);
    let mut warnings = Vec::new();
    let mut headings: Vec<(usize, String, String)> = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        if TOC_ENTRY.is_match(l) {
            continue;
        }
        if let Some(c) = HEADING.captures(l) {
            headings.push((i, c[1].to_string(), c[2].to_string()));
        }
    }
    let preamble_end = headings.first().map_or(lines.len(), |h| h.0);
    let title = find_title(&lines[..preamble_end]).unwrap_or_else(|| format!("RFC {rfc_number}"));

    let mut sections: Vec<Section> = Vec::new();
    if headings.is_empty() {
        warnings.push(format!("RFC {rfc_number}: no numbered sections found; kept as section 0"));
        sections.push(Section { section_id: "0".into(), heading: title.clone(), body: paragraphs(&lines) });
    }
    for (n, (start, id, heading)) in headings.iter().enumerate() {
        let end = headings.get(n + 1).map_or(lines.len(), |h| h.0);
        let section =
            Section { section_id: id.clone(), heading: heading.clone(), body: paragraphs(&lines[start + 1..end]) };
        match sections.iter_mut().find(|s| s.section_id == *id) {
            Some(existing) => {
                warnings.push(format!("RFC {rfc_number}: section {id} appears twice; keeping the later one"));
                *existing = section;
            }
            None => sections.push(section),
        }
    }
    Ok((RfcDocument { rfc_number, title, sections }, warnings))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    RfcText,
    CpsaDef,
    Pair,
}

/// One dataset line. Field order here is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub kind: RecordKind,
    pub rfc_ref: Option<RfcRef>,
    pub requirement_text: Option<String>,
    pub cpsa_text: Option<String>,
    pub validated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rfc: u32,
    pub section: String,
    pub cpsa_file: String,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, CorpusError> {
    serde_json::from_str(text).map_err(|e| CorpusError::InvalidManifest(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationFailure {
    pub id: String,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BuildReport {
    pub counts: BTreeMap<RecordKind, usize>,
    pub validation_failures: Vec<ValidationFailure>,
    /// CPSA files left out because they do not parse.
    pub unparsed_files: Vec<ValidationFailure>,
    pub warnings: Vec<String>,
}

fn section_text(s: &Section) -> String {
    format!("{} {}\n\n{}", s.section_id, s.heading, s.body).trim_end().to_string()
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Read { path: path.display().to_string(), source })
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, CorpusError> {
    let err = |source| CorpusError::Read { path: dir.display().to_string(), source };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(err)? {
        let path = entry.map_err(err)?.path();
        if path.is_file() && path.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Builds rfc_text records for every section of every `.txt` in `rfc_dir`,
/// cpsa_def records for every parsing `.scm` in `cpsa_dir`, and a pair
/// record per manifest entry. Records come back sorted by id.
pub fn build_dataset(
    rfc_dir: &Path,
    cpsa_dir: &Path,
    manifest: &[ManifestEntry],
) -> Result<(Vec<DatasetRecord>, BuildReport), CorpusError> {
    let mut report = BuildReport::default();
    let mut records: Vec<DatasetRecord> = Vec::new();

    let mut docs: BTreeMap<u32, RfcDocument> = BTreeMap::new();
    for path in files_with_ext(rfc_dir, "txt")? {
        let (doc, warnings) = ingest_rfc(&read(&path)?, rfc_number_from_filename(&file_name(&path)))?;
        report.warnings.extend(warnings);
        for s in &doc.sections {
            records.push(DatasetRecord {
                id: format!("rfc{}-s{}", doc.rfc_number, s.section_id),
                kind: RecordKind::RfcText,
                rfc_ref: Some(RfcRef { rfc_number: doc.rfc_number, section_id: s.section_id.clone() }),
                requirement_text: Some(section_text(s)),
                cpsa_text: None,
                validated: false,
            });
        }
        let n = doc.rfc_number;
        if docs.insert(n, doc).is_some() {
            return Err(CorpusError::DuplicateRfc(n));
        }
    }

    let mut cpsa: BTreeMap<String, (String, bool)> = BTreeMap::new();
    for path in files_with_ext(cpsa_dir, "scm")? {
        let text = read(&path)?;
        let check = check_text(&text);
        let id = format!("cpsa-{}", stem(&path));
        if !check.parses() {
            report.unparsed_files.push(ValidationFailure { id: file_name(&path), diagnostics: check.render_lines() });
            continue;
        }
        let validated = check.is_clean();
        if !validated {
            report.validation_failures.push(ValidationFailure { id: id.clone(), diagnostics: check.render_lines() });
        }
        records.push(DatasetRecord {
            id,
            kind: RecordKind::CpsaDef,
            rfc_ref: None,
            requirement_text: None,
            cpsa_text: Some(text.clone()),
            validated,
        });
        cpsa.insert(file_name(&path), (text, validated));
    }

    for m in manifest {
        let doc = docs
            .get(&m.rfc)
            .ok_or_else(|| CorpusError::ManifestRefersToMissingFile(format!("no ingested file holds RFC {}", m.rfc)))?;
        let section = doc
            .section(&m.section)
            .ok_or_else(|| CorpusError::ManifestRefersToMissingSection { rfc: m.rfc, section: m.section.clone() })?;
        let id = format!("pair-rfc{}-s{}-{}", m.rfc, m.section, stem(Path::new(&m.cpsa_file)));
        let (text, validated) = match cpsa.get(&m.cpsa_file) {
            Some(entry) => entry.clone(),
            None if cpsa_dir.join(&m.cpsa_file).is_file() => {
                let reason = report
                    .unparsed_files
                    .iter()
                    .find(|f| f.id == m.cpsa_file)
                    .map(|f| f.diagnostics.join("; "))
                    .unwrap_or_default();
                return Err(CorpusError::PairDoesNotParse { id, file: m.cpsa_file.clone(), reason });
            }
            None => return Err(CorpusError::ManifestRefersToMissingFile(m.cpsa_file.clone())),
        };
        records.push(DatasetRecord {
            id,
            kind: RecordKind::Pair,
            rfc_ref: Some(RfcRef { rfc_number: m.rfc, section_id: m.section.clone() }),
            requirement_text: Some(section_text(section)),
            cpsa_text: Some(text),
            validated,
        });
    }

    records.sort_by(|a, b| a.id.cmp(&b.id));
    let mut seen = BTreeSet::new();
    for r in &records {
        if !seen.insert(&r.id) {
            return Err(CorpusError::DuplicateRecordId(r.id.clone()));
        }
        *report.counts.entry(r.kind).or_default() += 1;
    }
    Ok((records, report))
}

/// One JSON object per line, sorted by id.
pub fn to_jsonl(records: &[DatasetRecord]) -> String {
    let mut sorted: Vec<&DatasetRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.into_iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
}

pub fn from_jsonl(text: &str) -> Result<Vec<DatasetRecord>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CorpusError::BadJsonl { line: i + 1, reason: e.to_string() }))
        .collect()
}

/// Writes the dataset atomically. Returns the number of lines written.
pub fn export_jsonl(records: &[DatasetRecord], path: &Path) -> Result<usize, CorpusError> {
    let unwritable = |reason: String| CorpusError::UnwritableOutput { path: path.display().to_string(), reason };
    if records.is_empty() {
        warn!(path = %path.display(), "exporting an empty dataset");
    }
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| unwritable(e.to_string()))?;
    tmp.write_all(to_jsonl(records).as_bytes()).map_err(|e| unwritable(e.to_string()))?;
    tmp.persist(path).map_err(|e| unwritable(e.error.to_string()))?;
    Ok(records.len())
}

pub fn import_jsonl(path: &Path) -> Result<Vec<DatasetRecord>, CorpusError> {
    from_jsonl(&read(path)?)
}

/// Pair records as few-shot exemplars, in id order.
pub fn exemplars_from_records(records: &[DatasetRecord]) -> Vec<Exemplar> {
    let mut out: Vec<Exemplar> = records
        .iter()
        .filter(|r| r.kind == RecordKind::Pair)
        .filter_map(|r| {
            Some(Exemplar {
                id: r.id.clone(),
                requirement_text: r.requirement_text.clone(),
                cpsa_text: r.cpsa_text.clone()?,
                validated: r.validated,
            })
        })
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}
