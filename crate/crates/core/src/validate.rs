//! Well-formedness checks over lowered protocols and skeletons.
//!
//! These are the checks CPSA itself would trip over when reading a file:
//! undeclared variables, ill-sorted terms, origination declarations on
//! non-atoms, skeletons pointing at missing roles or past the end of a
//! trace. No shape analysis happens here.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{
    lower_document, Direction, Document, LowerDiagnostic, Protocol, Role, Skeleton, Sort, Term, VarEnv,
};
use crate::sexpr::{parse, ParseError, Severity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ValidationCode {
    UndeclaredVariable,
    UnusedVariable,
    SortMismatch,
    DeclTargetMissing,
    DuplicateRoleName,
    UnknownRoleInStrand,
    HeightExceedsTrace,
    EmptyTraceRole,
    NonOriginatingUniq,
    /// Skeleton names a protocol other than the one it is checked against.
    UnknownProtocol,
    /// Skeleton without strands.
    EmptySkeleton,
}

impl ValidationCode {
    /// The nine codes every validator mutation must be able to reach.
    pub const CORE: [ValidationCode; 9] = [
        ValidationCode::UndeclaredVariable,
        ValidationCode::UnusedVariable,
        ValidationCode::SortMismatch,
        ValidationCode::DeclTargetMissing,
        ValidationCode::DuplicateRoleName,
        ValidationCode::UnknownRoleInStrand,
        ValidationCode::HeightExceedsTrace,
        ValidationCode::EmptyTraceRole,
        ValidationCode::NonOriginatingUniq,
    ];

    pub fn severity(self) -> Severity {
        match self {
            ValidationCode::UnusedVariable | ValidationCode::NonOriginatingUniq | ValidationCode::EmptySkeleton => {
                Severity::Warning
            }
            _ => Severity::Error,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ValidationCode::UndeclaredVariable => "UndeclaredVariable",
            ValidationCode::UnusedVariable => "UnusedVariable",
            ValidationCode::SortMismatch => "SortMismatch",
            ValidationCode::DeclTargetMissing => "DeclTargetMissing",
            ValidationCode::DuplicateRoleName => "DuplicateRoleName",
            ValidationCode::UnknownRoleInStrand => "UnknownRoleInStrand",
            ValidationCode::HeightExceedsTrace => "HeightExceedsTrace",
            ValidationCode::EmptyTraceRole => "EmptyTraceRole",
            ValidationCode::NonOriginatingUniq => "NonOriginatingUniq",
            ValidationCode::UnknownProtocol => "UnknownProtocol",
            ValidationCode::EmptySkeleton => "EmptySkeleton",
        }
    }
}

impl fmt::Display for ValidationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One step of a locus path. Indices compare numerically.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathSeg {
    Index(usize),
    Name(String),
}

impl fmt::Display for PathSeg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PathSeg::Index(i) => write!(f, "{i}"),
            PathSeg::Name(n) => f.write_str(n),
        }
    }
}

/// Where a finding applies: a role (or `skeleton`) plus a path inside it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Locus {
    pub scope: String,
    pub path: Vec<PathSeg>,
}

impl Locus {
    fn new(scope: &str) -> Self {
        Locus { scope: scope.to_string(), path: Vec::new() }
    }

    fn at(&self, seg: impl Into<PathSeg>) -> Locus {
        let mut l = self.clone();
        l.path.push(seg.into());
        l
    }
}

impl From<usize> for PathSeg {
    fn from(i: usize) -> Self {
        PathSeg::Index(i)
    }
}

impl From<&str> for PathSeg {
    fn from(s: &str) -> Self {
        PathSeg::Name(s.to_string())
    }
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.scope)?;
        for seg in &self.path {
            write!(f, "/{seg}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationDiagnostic {
    pub code: ValidationCode,
    pub severity: Severity,
    pub message: String,
    pub locus: Locus,
}

impl ValidationDiagnostic {
    fn new(code: ValidationCode, locus: Locus, message: String) -> Self {
        ValidationDiagnostic { code, severity: code.severity(), message, locus }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    /// `severity code role/path: message`, the lint line format.
    pub fn render(&self) -> String {
        format!("{} {} {}: {}", self.severity, self.code, self.locus, self.message)
    }
}

impl fmt::Display for ValidationDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SortMismatch {
    pub path: Vec<PathSeg>,
    pub found: Sort,
    pub expected: Sort,
}

impl fmt::Display for SortMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "expected {} but found {}", self.expected, self.found)
    }
}

/// Whether a term synthesized as `found` may appear where `expected` is
/// required. `is_var` marks bare variables, which are allowed to carry the
/// catch-all `mesg` sort into typed positions.
fn accepts(expected: Sort, found: Sort, is_var: bool) -> bool {
    match expected {
        Sort::Mesg => true,
        // Key positions: asymmetric, symmetric, or a DH shared secret.
        Sort::Akey | Sort::Skey => {
            matches!(found, Sort::Akey | Sort::Skey | Sort::Base) || (is_var && found == Sort::Mesg)
        }
        Sort::Name | Sort::Base => found == expected || (is_var && found == Sort::Mesg),
        _ => found == expected,
    }
}

/// Synthesizes the sort of `term`, checking arguments against their
/// expected sorts. Variables missing from `env` synthesize `mesg` without
/// a finding; undeclared variables are reported separately.
fn synth(term: &Term, env: &VarEnv, path: &mut Vec<PathSeg>, out: &mut Vec<SortMismatch>) -> Sort {
    let check = |child: &Term, seg: PathSeg, expected: Sort, path: &mut Vec<PathSeg>, out: &mut Vec<SortMismatch>| {
        path.push(seg);
        let found = synth(child, env, path, out);
        if !accepts(expected, found, matches!(child, Term::Var(_))) {
            out.push(SortMismatch { path: path.clone(), found, expected });
        }
        path.pop();
    };
    match term {
        Term::Var(v) => env.get(v).copied().unwrap_or(Sort::Mesg),
        Term::Tag(_) => Sort::Mesg,
        Term::Gen => Sort::Base,
        Term::Enc { payloads, key } => {
            for (i, p) in payloads.iter().enumerate() {
                check(p, PathSeg::Index(i), Sort::Mesg, path, out);
            }
            check(key, "key".into(), Sort::Akey, path, out);
            Sort::Mesg
        }
        Term::Cat(parts) | Term::Hash(parts) => {
            for (i, p) in parts.iter().enumerate() {
                check(p, PathSeg::Index(i), Sort::Mesg, path, out);
            }
            Sort::Mesg
        }
        Term::Pubk(a) | Term::Privk(a) => {
            check(a, PathSeg::Index(0), Sort::Name, path, out);
            Sort::Akey
        }
        Term::Invk(k) => {
            check(k, PathSeg::Index(0), Sort::Akey, path, out);
            Sort::Akey
        }
        Term::Ltk(a, b) => {
            check(a, PathSeg::Index(0), Sort::Name, path, out);
            check(b, PathSeg::Index(1), Sort::Name, path, out);
            Sort::Skey
        }
        Term::Exp(base, exponent) => {
            check(base, "base".into(), Sort::Base, path, out);
            check(exponent, "exponent".into(), Sort::Expn, path, out);
            Sort::Base
        }
    }
}

fn sort_findings(term: &Term, env: &VarEnv, expected: Option<Sort>) -> (Sort, Vec<SortMismatch>) {
    let mut out = Vec::new();
    let mut path = Vec::new();
    let found = synth(term, env, &mut path, &mut out);
    if let Some(expected) = expected {
        if !accepts(expected, found, matches!(term, Term::Var(_))) {
            out.push(SortMismatch { path: Vec::new(), found, expected });
        }
    }
    (found, out)
}

/// Synthesizes the sort of `term` under `env`, failing with the first
/// mismatch found (innermost first, left to right).
///
/// Encryption/hash/concatenation/tags are `mesg`, key constructors are
/// `akey` (`ltk` is `skey`), `(gen)` and `exp` are `base`, variables take
/// their declared sort. Key positions accept `akey`, `skey`, `base`, or a
/// `mesg` variable.
pub fn sort_check(term: &Term, env: &VarEnv, expected: Option<Sort>) -> Result<Sort, SortMismatch> {
    let (found, mut findings) = sort_findings(term, env, expected);
    if findings.is_empty() {
        Ok(found)
    } else {
        Err(findings.remove(0))
    }
}

fn is_key_term(t: &Term) -> bool {
    match t {
        Term::Pubk(a) | Term::Privk(a) => matches!(**a, Term::Var(_)),
        Term::Invk(k) => matches!(**k, Term::Var(_)) || is_key_term(k),
        Term::Ltk(a, b) => matches!(**a, Term::Var(_)) && matches!(**b, Term::Var(_)),
        _ => false,
    }
}

/// Origination targets must be declared variables or key terms over them.
fn check_targets(label: &str, terms: &[Term], env: &VarEnv, locus: &Locus, out: &mut Vec<ValidationDiagnostic>) {
    for (i, t) in terms.iter().enumerate() {
        let here = locus.at(label).at(i);
        let shape_ok = matches!(t, Term::Var(_)) || is_key_term(t);
        let missing: Vec<&str> = t.vars().into_iter().filter(|v| !env.contains_key(*v)).collect();
        if !shape_ok {
            out.push(ValidationDiagnostic::new(
                ValidationCode::DeclTargetMissing,
                here,
                format!("{label} target {t} is neither a variable nor a key over variables"),
            ));
        } else if !missing.is_empty() {
            out.push(ValidationDiagnostic::new(
                ValidationCode::DeclTargetMissing,
                here,
                format!("{label} target {t} uses undeclared {}", missing.join(", ")),
            ));
        }
    }
}

fn validate_role(role: &Role, out: &mut Vec<ValidationDiagnostic>) {
    let locus = Locus::new(&role.name);
    let env = role.env();
    if role.trace.is_empty() {
        out.push(ValidationDiagnostic::new(
            ValidationCode::EmptyTraceRole,
            locus.at("trace"),
            format!("role {} has an empty trace", role.name),
        ));
    }
    let mut used: HashSet<&str> = HashSet::new();
    for (i, ev) in role.trace.iter().enumerate() {
        let here = locus.at("trace").at(i);
        let mut reported = BTreeSet::new();
        for v in ev.payload.vars() {
            used.insert(v);
            if !env.contains_key(v) && reported.insert(v) {
                out.push(ValidationDiagnostic::new(
                    ValidationCode::UndeclaredVariable,
                    here.clone(),
                    format!("variable {v} is not declared in role {}", role.name),
                ));
            }
        }
        for m in sort_findings(&ev.payload, &env, Some(Sort::Mesg)).1 {
            let mut l = here.clone();
            l.path.extend(m.path.iter().cloned());
            out.push(ValidationDiagnostic::new(ValidationCode::SortMismatch, l, m.to_string()));
        }
    }
    check_targets("uniq-orig", &role.uniq_orig, &env, &locus, out);
    check_targets("non-orig", &role.non_orig, &env, &locus, out);
    check_targets("pen-non-orig", &role.pen_non_orig, &env, &locus, out);

    // Usage and origination only make sense against a nonempty trace.
    if role.trace.is_empty() {
        return;
    }
    for (name, _) in role.declared() {
        if !used.contains(name) {
            out.push(ValidationDiagnostic::new(
                ValidationCode::UnusedVariable,
                locus.at("vars").at(name),
                format!("variable {name} is declared but never used in the trace"),
            ));
        }
    }
    for (i, t) in role.uniq_orig.iter().enumerate() {
        // Undeclared targets already got DeclTargetMissing.
        if t.vars().iter().any(|v| !env.contains_key(*v)) {
            continue;
        }
        let first = role.trace.iter().find(|e| e.payload.contains(t));
        if first.map(|e| e.direction) != Some(Direction::Send) {
            let why = match first {
                None => "never occurs in the trace",
                Some(_) => "is received before it is sent",
            };
            out.push(ValidationDiagnostic::new(
                ValidationCode::NonOriginatingUniq,
                locus.at("uniq-orig").at(i),
                format!("uniq-orig {t} {why}, so role {} does not originate it", role.name),
            ));
        }
    }
}

fn sort_diagnostics(out: &mut [ValidationDiagnostic]) {
    out.sort_by(|a, b| (&a.locus, a.code).cmp(&(&b.locus, b.code)));
}

/// Checks a lowered protocol. Findings are sorted by (role, path, code).
pub fn validate_protocol(p: &Protocol) -> Vec<ValidationDiagnostic> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, role) in p.roles.iter().enumerate() {
        if !seen.insert(role.name.as_str()) {
            out.push(ValidationDiagnostic::new(
                ValidationCode::DuplicateRoleName,
                Locus::new(&role.name).at("defrole").at(i),
                format!("role name {} is used more than once in protocol {}", role.name, p.name),
            ));
        }
        validate_role(role, &mut out);
    }
    sort_diagnostics(&mut out);
    out
}

/// Checks a skeleton against the protocol it instantiates.
pub fn validate_skeleton(s: &Skeleton, p: &Protocol) -> Vec<ValidationDiagnostic> {
    let mut out = Vec::new();
    let locus = Locus::new("skeleton");
    if s.protocol_name != p.name {
        out.push(ValidationDiagnostic::new(
            ValidationCode::UnknownProtocol,
            locus.clone(),
            format!("skeleton refers to protocol {} but was checked against {}", s.protocol_name, p.name),
        ));
    }
    if s.strands.is_empty() {
        out.push(ValidationDiagnostic::new(
            ValidationCode::EmptySkeleton,
            locus.clone(),
            "skeleton has no strands".to_string(),
        ));
    }
    let env = s.env();
    for (i, strand) in s.strands.iter().enumerate() {
        let here = locus.at("defstrand").at(i);
        let Some(role) = p.role(&strand.role) else {
            out.push(ValidationDiagnostic::new(
                ValidationCode::UnknownRoleInStrand,
                here,
                format!("protocol {} has no role {}", p.name, strand.role),
            ));
            continue;
        };
        if strand.height as usize > role.trace.len() {
            out.push(ValidationDiagnostic::new(
                ValidationCode::HeightExceedsTrace,
                here.clone(),
                format!("height {} exceeds the {}-event trace of role {}", strand.height, role.trace.len(), role.name),
            ));
        }
        let role_env = role.env();
        for (lhs, rhs) in &strand.bindings {
            if !role_env.contains_key(lhs) {
                out.push(ValidationDiagnostic::new(
                    ValidationCode::UndeclaredVariable,
                    here.at(lhs.as_str()),
                    format!("role {} declares no variable {lhs}", role.name),
                ));
            }
            for v in rhs.vars().into_iter().collect::<BTreeSet<_>>() {
                if !env.contains_key(v) {
                    out.push(ValidationDiagnostic::new(
                        ValidationCode::UndeclaredVariable,
                        here.at(lhs.as_str()),
                        format!("variable {v} is not declared in the skeleton"),
                    ));
                }
            }
        }
    }
    check_targets("uniq-orig", &s.uniq_orig, &env, &locus, &mut out);
    check_targets("non-orig", &s.non_orig, &env, &locus, &mut out);
    check_targets("pen-non-orig", &s.pen_non_orig, &env, &locus, &mut out);
    sort_diagnostics(&mut out);
    out
}

pub fn has_errors(diags: &[ValidationDiagnostic]) -> bool {
    diags.iter().any(ValidationDiagnostic::is_error)
}

/// Skeleton whose protocol is nowhere to be found.
pub fn missing_protocol(s: &Skeleton) -> ValidationDiagnostic {
    ValidationDiagnostic::new(
        ValidationCode::UnknownProtocol,
        Locus::new("skeleton"),
        format!("no protocol named {} is available", s.protocol_name),
    )
}

/// Parse, lower and validate a whole CPSA file without any repair.
#[derive(Debug, Clone)]
pub struct TextCheck {
    pub parse_error: Option<ParseError>,
    pub document: Option<Document>,
    pub validation: Vec<ValidationDiagnostic>,
}

impl TextCheck {
    pub fn parses(&self) -> bool {
        self.parse_error.is_none()
    }

    pub fn lowers(&self) -> bool {
        self.document.as_ref().is_some_and(|d| !d.has_errors())
    }

    /// Parses, lowers and validates without error-severity findings.
    pub fn is_clean(&self) -> bool {
        self.lowers() && !has_errors(&self.validation)
    }

    /// Every finding in lint line format, parse error first, then lowering,
    /// then validation.
    pub fn render_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        if let Some(e) = &self.parse_error {
            lines.push(format!("error {} @{}: {}", e.code(), e.span(), e));
        }
        if let Some(doc) = &self.document {
            lines.extend(doc.diagnostics.iter().map(LowerDiagnostic::render));
        }
        lines.extend(self.validation.iter().map(ValidationDiagnostic::render));
        lines
    }
}

pub fn check_text(text: &str) -> TextCheck {
    let forms = match parse(text) {
        Ok(f) => f,
        Err(e) => return TextCheck { parse_error: Some(e), document: None, validation: vec![] },
    };
    let document = lower_document(&forms);
    let mut validation = Vec::new();
    if !document.has_errors() {
        for p in &document.protocols {
            validation.extend(validate_protocol(p));
        }
        for s in &document.skeletons {
            match document.protocol(&s.protocol_name) {
                Some(p) => validation.extend(validate_skeleton(s, p)),
                None => validation.push(missing_protocol(s)),
            }
        }
    }
    TextCheck { parse_error: None, document: Some(document), validation }
}
