//! Typed CPSA protocol definitions and skeletons, lowered from generic
//! s-expressions and emitted back to them.
//!
//! Lowering is total: malformed input never aborts, every malformed subform
//! yields a [`LowerDiagnostic`], and only diagnostics of error severity
//! prevent a model from being produced.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::sexpr::{SExpr, SExprKind, Severity, Span};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sort {
    Text,
    Data,
    Name,
    Skey,
    Akey,
    Mesg,
    Expn,
    Base,
}

impl Sort {
    pub const ALL: [Sort; 8] =
        [Sort::Text, Sort::Data, Sort::Name, Sort::Skey, Sort::Akey, Sort::Mesg, Sort::Expn, Sort::Base];

    /// Parses a sort name. `expt` is accepted as an alias of `expn`.
    pub fn from_name(name: &str) -> Option<Sort> {
        Some(match name {
            "text" => Sort::Text,
            "data" => Sort::Data,
            "name" => Sort::Name,
            "skey" => Sort::Skey,
            "akey" => Sort::Akey,
            "mesg" => Sort::Mesg,
            "expn" | "expt" => Sort::Expn,
            "base" => Sort::Base,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sort::Text => "text",
            Sort::Data => "data",
            Sort::Name => "name",
            Sort::Skey => "skey",
            Sort::Akey => "akey",
            Sort::Mesg => "mesg",
            Sort::Expn => "expn",
            Sort::Base => "base",
        }
    }
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algebra {
    #[serde(rename = "basic")]
    Basic,
    #[serde(rename = "diffie-hellman")]
    DiffieHellman,
}

impl Algebra {
    pub fn from_name(name: &str) -> Option<Algebra> {
        match name {
            "basic" => Some(Algebra::Basic),
            "diffie-hellman" => Some(Algebra::DiffieHellman),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algebra::Basic => "basic",
            Algebra::DiffieHellman => "diffie-hellman",
        }
    }
}

/// Message-algebra term.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Var(String),
    /// `(enc p1 ... pn key)`: the last argument is the key.
    Enc {
        payloads: Vec<Term>,
        key: Box<Term>,
    },
    Cat(Vec<Term>),
    Hash(Vec<Term>),
    Pubk(Box<Term>),
    Privk(Box<Term>),
    Invk(Box<Term>),
    Ltk(Box<Term>, Box<Term>),
    Exp(Box<Term>, Box<Term>),
    Gen,
    Tag(String),
}

impl Term {
    pub fn var(name: impl Into<String>) -> Term {
        Term::Var(name.into())
    }

    pub fn exp(base: Term, exponent: Term) -> Term {
        Term::Exp(Box::new(base), Box::new(exponent))
    }

    /// Direct subterms, in argument order.
    pub fn children(&self) -> Vec<&Term> {
        match self {
            Term::Var(_) | Term::Gen | Term::Tag(_) => vec![],
            Term::Enc { payloads, key } => payloads.iter().chain(std::iter::once(key.as_ref())).collect(),
            Term::Cat(parts) | Term::Hash(parts) => parts.iter().collect(),
            Term::Pubk(t) | Term::Privk(t) | Term::Invk(t) => vec![t],
            Term::Ltk(a, b) | Term::Exp(a, b) => vec![a, b],
        }
    }

    /// Variable names in left-to-right order, with repeats.
    pub fn vars(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        if let Term::Var(v) = self {
            out.push(v);
        }
        for c in self.children() {
            c.collect_vars(out);
        }
    }

    /// Whether `needle` occurs anywhere in this term (including itself).
    pub fn contains(&self, needle: &Term) -> bool {
        self == needle || self.children().into_iter().any(|c| c.contains(needle))
    }

    pub fn uses_dh(&self) -> bool {
        matches!(self, Term::Exp(..) | Term::Gen) || self.children().into_iter().any(Term::uses_dh)
    }

    pub fn rename_vars(&self, map: &HashMap<String, String>) -> Term {
        let r = |t: &Term| Box::new(t.rename_vars(map));
        let rs = |ts: &[Term]| ts.iter().map(|t| t.rename_vars(map)).collect();
        match self {
            Term::Var(v) => Term::Var(map.get(v).cloned().unwrap_or_else(|| v.clone())),
            Term::Enc { payloads, key } => Term::Enc { payloads: rs(payloads), key: r(key) },
            Term::Cat(p) => Term::Cat(rs(p)),
            Term::Hash(p) => Term::Hash(rs(p)),
            Term::Pubk(t) => Term::Pubk(r(t)),
            Term::Privk(t) => Term::Privk(r(t)),
            Term::Invk(t) => Term::Invk(r(t)),
            Term::Ltk(a, b) => Term::Ltk(r(a), r(b)),
            Term::Exp(a, b) => Term::Exp(r(a), r(b)),
            Term::Gen => Term::Gen,
            Term::Tag(s) => Term::Tag(s.clone()),
        }
    }

    pub fn operator(&self) -> &'static str {
        match self {
            Term::Var(_) => "var",
            Term::Enc { .. } => "enc",
            Term::Cat(_) => "cat",
            Term::Hash(_) => "hash",
            Term::Pubk(_) => "pubk",
            Term::Privk(_) => "privk",
            Term::Invk(_) => "invk",
            Term::Ltk(..) => "ltk",
            Term::Exp(..) => "exp",
            Term::Gen => "gen",
            Term::Tag(_) => "tag",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", emit_term(self))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarDecl {
    pub names: Vec<String>,
    pub sort: Sort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Send,
    Recv,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Send => "send",
            Direction::Recv => "recv",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub direction: Direction,
    pub payload: Term,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Role {
    pub name: String,
    pub vars: Vec<VarDecl>,
    pub trace: Vec<Event>,
    pub uniq_orig: Vec<Term>,
    pub non_orig: Vec<Term>,
    pub pen_non_orig: Vec<Term>,
    /// Role-level forms this model does not interpret, kept verbatim.
    pub extra: Vec<SExpr>,
}

impl Role {
    /// Declared variables with their sorts, in declaration order.
    pub fn declared(&self) -> Vec<(&str, Sort)> {
        declared(&self.vars)
    }

    pub fn env(&self) -> VarEnv {
        env_of(&self.vars)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocol {
    pub name: String,
    pub algebra: Algebra,
    /// Whether the algebra was written in the source; emit only writes it
    /// back when it was.
    pub algebra_explicit: bool,
    pub roles: Vec<Role>,
    pub extra: Vec<SExpr>,
}

impl Protocol {
    pub fn role(&self, name: &str) -> Option<&Role> {
        self.roles.iter().find(|r| r.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strand {
    pub role: String,
    pub height: u32,
    pub bindings: Vec<(String, Term)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    pub protocol_name: String,
    pub vars: Vec<VarDecl>,
    pub strands: Vec<Strand>,
    pub uniq_orig: Vec<Term>,
    pub non_orig: Vec<Term>,
    pub pen_non_orig: Vec<Term>,
    pub extra: Vec<SExpr>,
}

impl Skeleton {
    pub fn env(&self) -> VarEnv {
        env_of(&self.vars)
    }
}

pub type VarEnv = BTreeMap<String, Sort>;

fn declared(vars: &[VarDecl]) -> Vec<(&str, Sort)> {
    vars.iter().flat_map(|d| d.names.iter().map(move |n| (n.as_str(), d.sort))).collect()
}

fn env_of(vars: &[VarDecl]) -> VarEnv {
    declared(vars).into_iter().map(|(n, s)| (n.to_string(), s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LowerCode {
    UnknownForm,
    UnknownSort,
    UnknownOperator,
    ArityError,
    MalformedVars,
    MalformedTrace,
    EmptyRole,
}

impl LowerCode {
    pub const ALL: [LowerCode; 7] = [
        LowerCode::UnknownForm,
        LowerCode::UnknownSort,
        LowerCode::UnknownOperator,
        LowerCode::ArityError,
        LowerCode::MalformedVars,
        LowerCode::MalformedTrace,
        LowerCode::EmptyRole,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LowerCode::UnknownForm => "UnknownForm",
            LowerCode::UnknownSort => "UnknownSort",
            LowerCode::UnknownOperator => "UnknownOperator",
            LowerCode::ArityError => "ArityError",
            LowerCode::MalformedVars => "MalformedVars",
            LowerCode::MalformedTrace => "MalformedTrace",
            LowerCode::EmptyRole => "EmptyRole",
        }
    }
}

impl fmt::Display for LowerCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LowerDiagnostic {
    pub code: LowerCode,
    pub severity: Severity,
    pub message: String,
    pub span: Span,
}

impl LowerDiagnostic {
    fn error(code: LowerCode, span: Span, detail: impl fmt::Display) -> Self {
        LowerDiagnostic { code, severity: Severity::Error, message: template(code, detail), span }
    }

    fn warning(code: LowerCode, span: Span, detail: impl fmt::Display) -> Self {
        LowerDiagnostic { code, severity: Severity::Warning, message: template(code, detail), span }
    }

    pub fn is_error(&self) -> bool {
        self.severity == Severity::Error
    }

    /// `severity code @start..end: message`
    pub fn render(&self) -> String {
        format!("{} {} @{}: {}", self.severity, self.code, self.span, self.message)
    }
}

fn template(code: LowerCode, detail: impl fmt::Display) -> String {
    match code {
        LowerCode::UnknownForm => format!("unrecognized form: {detail}"),
        LowerCode::UnknownSort => format!("unknown sort: {detail}"),
        LowerCode::UnknownOperator => format!("unknown operator: {detail}"),
        LowerCode::ArityError => format!("wrong number or shape of arguments: {detail}"),
        LowerCode::MalformedVars => format!("malformed variable declaration: {detail}"),
        LowerCode::MalformedTrace => format!("malformed trace: {detail}"),
        LowerCode::EmptyRole => format!("protocol declares no roles: {detail}"),
    }
}

/// A lowered value plus any warnings produced on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Lowered<T> {
    pub value: T,
    pub warnings: Vec<LowerDiagnostic>,
}

type LowerResult<T> = Result<Lowered<T>, Vec<LowerDiagnostic>>;

struct Sink(Vec<LowerDiagnostic>);

impl Sink {
    fn finish<T>(self, value: T) -> LowerResult<T> {
        if self.0.iter().any(LowerDiagnostic::is_error) {
            Err(self.0)
        } else {
            Ok(Lowered { value, warnings: self.0 })
        }
    }

    fn err(&mut self, code: LowerCode, span: Span, detail: impl fmt::Display) {
        self.0.push(LowerDiagnostic::error(code, span, detail));
    }
}

fn describe(e: &SExpr) -> String {
    let s = crate::sexpr::print_flat(e);
    if s.len() > 60 {
        format!("{}...", &s[..s.char_indices().nth(57).map_or(s.len(), |(i, _)| i)])
    } else {
        s
    }
}

struct TermLowerer {
    allow_dh: bool,
}

impl TermLowerer {
    fn lower(&self, e: &SExpr, sink: &mut Sink) -> Option<Term> {
        match &e.kind {
            // Unresolved symbols still lower to Var; the validator reports them.
            SExprKind::Symbol(s) => Some(Term::Var(s.clone())),
            SExprKind::Str(s) => Some(Term::Tag(s.clone())),
            SExprKind::Int(_) => {
                sink.err(LowerCode::UnknownOperator, e.span, format!("number {} is not a message term", describe(e)));
                None
            }
            SExprKind::List(items) => {
                let Some(op) = items.first().and_then(SExpr::as_symbol) else {
                    sink.err(LowerCode::UnknownOperator, e.span, format!("{} has no operator", describe(e)));
                    return None;
                };
                let args = &items[1..];
                let arity = |sink: &mut Sink, expect: &str| {
                    sink.err(LowerCode::ArityError, e.span, format!("({op} ...) takes {expect}, found {}", args.len()));
                };
                // Lower every argument so nested errors are all reported.
                let lowered: Vec<Option<Term>> = args.iter().map(|a| self.lower(a, sink)).collect();
                if lowered.iter().any(Option::is_none) && op_known(op) {
                    return None;
                }
                let mut terms: Vec<Term> = lowered.into_iter().flatten().collect();
                match op {
                    "enc" => {
                        if terms.len() < 2 {
                            arity(sink, "at least one payload and a key");
                            return None;
                        }
                        let key = terms.pop().expect("len checked");
                        Some(Term::Enc { payloads: terms, key: Box::new(key) })
                    }
                    "cat" | "hash" => {
                        if terms.is_empty() {
                            arity(sink, "at least one argument");
                            return None;
                        }
                        Some(if op == "cat" { Term::Cat(terms) } else { Term::Hash(terms) })
                    }
                    "pubk" | "privk" | "invk" => {
                        if terms.len() != 1 {
                            arity(sink, "exactly one argument");
                            return None;
                        }
                        let t = Box::new(terms.pop().expect("len checked"));
                        Some(match op {
                            "pubk" => Term::Pubk(t),
                            "privk" => Term::Privk(t),
                            _ => Term::Invk(t),
                        })
                    }
                    "ltk" | "exp" => {
                        if op == "exp" && !self.allow_dh {
                            sink.err(LowerCode::UnknownOperator, e.span, "exp is not available in the basic algebra");
                            return None;
                        }
                        if terms.len() != 2 {
                            arity(sink, "exactly two arguments");
                            return None;
                        }
                        let b = Box::new(terms.pop().expect("len checked"));
                        let a = Box::new(terms.pop().expect("len checked"));
                        Some(if op == "ltk" { Term::Ltk(a, b) } else { Term::Exp(a, b) })
                    }
                    "gen" => {
                        if !self.allow_dh {
                            sink.err(LowerCode::UnknownOperator, e.span, "gen is not available in the basic algebra");
                            return None;
                        }
                        if !args.is_empty() {
                            arity(sink, "no arguments");
                            return None;
                        }
                        Some(Term::Gen)
                    }
                    _ => {
                        sink.err(LowerCode::UnknownOperator, e.span, op);
                        None
                    }
                }
            }
        }
    }
}

fn op_known(op: &str) -> bool {
    matches!(op, "enc" | "cat" | "hash" | "pubk" | "privk" | "invk" | "ltk" | "exp" | "gen")
}

/// Lowers a message term. DH operators are allowed; see [`lower_protocol`]
/// for the basic-algebra restriction.
///
/// Symbols lower to [`Term::Var`] whether or not `env` declares them;
/// undeclared variables are the validator's concern.
pub fn lower_term(expr: &SExpr, _env: &VarEnv) -> Result<Term, LowerDiagnostic> {
    let mut sink = Sink(Vec::new());
    let lowered = TermLowerer { allow_dh: true }.lower(expr, &mut sink);
    match lowered {
        Some(t) if sink.0.is_empty() => Ok(t),
        _ => Err(sink.0.into_iter().next().expect("failed lowering records a diagnostic")),
    }
}

fn lower_vars(form: &SExpr, sink: &mut Sink, seen: &mut Vec<String>) -> Vec<VarDecl> {
    let items = form.as_list().unwrap_or_default();
    let mut decls = Vec::new();
    for decl in &items[1..] {
        let Some(parts) = decl.as_list() else {
            sink.err(LowerCode::MalformedVars, decl.span, format!("{} is not a (names... sort) list", describe(decl)));
            continue;
        };
        if parts.len() < 2 {
            sink.err(
                LowerCode::MalformedVars,
                decl.span,
                format!("{} needs at least one name and a sort", describe(decl)),
            );
            continue;
        }
        let (names, sort) = parts.split_at(parts.len() - 1);
        let sort_expr = &sort[0];
        let sort = match sort_expr.as_symbol() {
            Some(s) => match Sort::from_name(s) {
                Some(sort) => Some(sort),
                None => {
                    sink.err(LowerCode::UnknownSort, sort_expr.span, s);
                    None
                }
            },
            None => {
                sink.err(
                    LowerCode::MalformedVars,
                    sort_expr.span,
                    format!("sort {} is not a symbol", describe(sort_expr)),
                );
                None
            }
        };
        let mut ok_names = Vec::new();
        for n in names {
            match n.as_symbol() {
                Some(name) if seen.iter().any(|s| s == name) => {
                    sink.err(LowerCode::MalformedVars, n.span, format!("variable {name} declared twice"));
                }
                Some(name) => {
                    seen.push(name.to_string());
                    ok_names.push(name.to_string());
                }
                None => sink.err(LowerCode::MalformedVars, n.span, format!("{} is not a variable name", describe(n))),
            }
        }
        if let Some(sort) = sort {
            if ok_names.len() == names.len() {
                decls.push(VarDecl { names: ok_names, sort });
            }
        }
    }
    decls
}

fn lower_terms(args: &[SExpr], lowerer: &TermLowerer, sink: &mut Sink) -> Vec<Term> {
    args.iter().filter_map(|a| lowerer.lower(a, sink)).collect()
}

fn lower_trace(form: &SExpr, lowerer: &TermLowerer, sink: &mut Sink) -> Vec<Event> {
    let items = form.as_list().unwrap_or_default();
    let mut events = Vec::new();
    for ev in &items[1..] {
        let direction = match ev.head() {
            Some("send") => Direction::Send,
            Some("recv") => Direction::Recv,
            _ => {
                sink.err(LowerCode::MalformedTrace, ev.span, format!("{} is not (send t) or (recv t)", describe(ev)));
                continue;
            }
        };
        let parts = ev.as_list().expect("head implies list");
        if parts.len() != 2 {
            sink.err(
                LowerCode::MalformedTrace,
                ev.span,
                format!("({} ...) takes exactly one message, found {}", direction.as_str(), parts.len() - 1),
            );
            continue;
        }
        if let Some(payload) = lowerer.lower(&parts[1], sink) {
            events.push(Event { direction, payload });
        }
    }
    events
}

/// Origination declaration kinds shared by roles and skeletons.
#[derive(Default)]
struct Origination {
    uniq_orig: Vec<Term>,
    non_orig: Vec<Term>,
    pen_non_orig: Vec<Term>,
}

impl Origination {
    fn slot(&mut self, head: &str) -> Option<&mut Vec<Term>> {
        match head {
            "uniq-orig" => Some(&mut self.uniq_orig),
            "non-orig" => Some(&mut self.non_orig),
            "pen-non-orig" => Some(&mut self.pen_non_orig),
            _ => None,
        }
    }
}

fn infer_dh(items: &[SExpr]) -> bool {
    items.iter().any(|e| match &e.kind {
        SExprKind::List(children) => matches!(e.head(), Some("exp") | Some("gen")) || infer_dh(children),
        _ => false,
    })
}

fn lower_role(form: &SExpr, allow_dh: bool, sink: &mut Sink) -> Option<Role> {
    let items = form.as_list().expect("defrole is a list");
    let Some(name) = items.get(1).and_then(SExpr::as_symbol) else {
        sink.err(LowerCode::ArityError, form.span, "(defrole name ...) requires a role name");
        return None;
    };
    let body = &items[2..];
    let errors_before = sink.0.iter().filter(|d| d.is_error()).count();
    let mut seen = Vec::new();
    let mut vars = Vec::new();
    let mut have_vars = false;
    for f in body.iter().filter(|f| f.head() == Some("vars")) {
        if have_vars {
            sink.err(LowerCode::MalformedVars, f.span, "duplicate (vars ...) form");
            continue;
        }
        have_vars = true;
        vars = lower_vars(f, sink, &mut seen);
    }
    let lowerer = TermLowerer { allow_dh };
    let mut trace = Vec::new();
    let mut have_trace = false;
    let mut orig = Origination::default();
    let mut extra = Vec::new();
    for f in body {
        match f.head() {
            Some("vars") => {}
            Some("trace") => {
                if have_trace {
                    sink.err(LowerCode::MalformedTrace, f.span, "duplicate (trace ...) form");
                    continue;
                }
                have_trace = true;
                trace = lower_trace(f, &lowerer, sink);
            }
            Some(h @ ("uniq-orig" | "non-orig" | "pen-non-orig")) => {
                let terms = lower_terms(&f.as_list().expect("list")[1..], &lowerer, sink);
                orig.slot(h).expect("known slot").extend(terms);
            }
            _ => {
                sink.0.push(LowerDiagnostic::warning(
                    LowerCode::UnknownForm,
                    f.span,
                    format!("role-level {}", describe(f)),
                ));
                extra.push(f.clone());
            }
        }
    }
    if sink.0.iter().filter(|d| d.is_error()).count() > errors_before {
        return None;
    }
    Some(Role {
        name: name.to_string(),
        vars,
        trace,
        uniq_orig: orig.uniq_orig,
        non_orig: orig.non_orig,
        pen_non_orig: orig.pen_non_orig,
        extra,
    })
}

/// Lowers a `(defprotocol name [algebra] roles...)` form.
///
/// When the algebra is omitted it is inferred: `diffie-hellman` if any
/// `exp` or `gen` occurs, `basic` otherwise. An explicit `basic` algebra
/// rejects `exp` and `gen` with [`LowerCode::UnknownOperator`].
pub fn lower_protocol(expr: &SExpr) -> LowerResult<Protocol> {
    let mut sink = Sink(Vec::new());
    if expr.head() != Some("defprotocol") {
        sink.err(LowerCode::UnknownForm, expr.span, format!("expected (defprotocol ...), found {}", describe(expr)));
        return Err(sink.0);
    }
    let items = expr.as_list().expect("head implies list");
    let Some(name) = items.get(1).and_then(SExpr::as_symbol) else {
        sink.err(LowerCode::ArityError, expr.span, "(defprotocol name ...) requires a protocol name");
        return Err(sink.0);
    };
    let mut rest = &items[2..];
    let mut algebra = None;
    if let Some(first) = rest.first() {
        if let Some(sym) = first.as_symbol() {
            match Algebra::from_name(sym) {
                Some(a) => algebra = Some(a),
                None => sink.err(LowerCode::UnknownForm, first.span, format!("algebra {sym}")),
            }
            rest = &rest[1..];
        }
    }
    let algebra_explicit = algebra.is_some();
    let algebra = algebra.unwrap_or(if infer_dh(rest) { Algebra::DiffieHellman } else { Algebra::Basic });
    let allow_dh = algebra == Algebra::DiffieHellman;
    let mut roles = Vec::new();
    let mut extra = Vec::new();
    for f in rest {
        match f.head() {
            Some("defrole") => {
                if let Some(r) = lower_role(f, allow_dh, &mut sink) {
                    roles.push(r);
                }
            }
            _ if f.as_list().is_some() => {
                sink.0.push(LowerDiagnostic::warning(
                    LowerCode::UnknownForm,
                    f.span,
                    format!("protocol-level {}", describe(f)),
                ));
                extra.push(f.clone());
            }
            _ => sink.err(LowerCode::UnknownForm, f.span, format!("stray atom {}", describe(f))),
        }
    }
    let role_forms = rest.iter().filter(|f| f.head() == Some("defrole")).count();
    if role_forms == 0 {
        sink.err(LowerCode::EmptyRole, expr.span, name);
    }
    sink.finish(Protocol { name: name.to_string(), algebra, algebra_explicit, roles, extra })
}

fn lower_strand(form: &SExpr, lowerer: &TermLowerer, sink: &mut Sink) -> Option<Strand> {
    let items = form.as_list().expect("defstrand is a list");
    let role = items.get(1).and_then(SExpr::as_symbol);
    let height = items.get(2).and_then(SExpr::as_int);
    let (Some(role), Some(height)) = (role, height) else {
        sink.err(
            LowerCode::ArityError,
            form.span,
            "(defstrand role height bindings...) requires a role name and a height",
        );
        return None;
    };
    if height < 1 || height > u32::MAX as i64 {
        sink.err(LowerCode::ArityError, form.span, format!("strand height must be at least 1, found {height}"));
        return None;
    }
    let mut bindings = Vec::new();
    let mut ok = true;
    for b in &items[3..] {
        match b.as_list() {
            Some([lhs, rhs]) if lhs.as_symbol().is_some() => match lowerer.lower(rhs, sink) {
                Some(t) => bindings.push((lhs.as_symbol().expect("checked").to_string(), t)),
                None => ok = false,
            },
            _ => {
                sink.err(LowerCode::ArityError, b.span, format!("binding {} is not (role-var value)", describe(b)));
                ok = false;
            }
        }
    }
    ok.then(|| Strand { role: role.to_string(), height: height as u32, bindings })
}

/// Lowers a `(defskeleton protocol (vars ...) (defstrand ...)... decls...)`
/// form. The protocol cross-reference is left to the validator.
pub fn lower_skeleton(expr: &SExpr) -> LowerResult<Skeleton> {
    let mut sink = Sink(Vec::new());
    if expr.head() != Some("defskeleton") {
        sink.err(LowerCode::UnknownForm, expr.span, format!("expected (defskeleton ...), found {}", describe(expr)));
        return Err(sink.0);
    }
    let items = expr.as_list().expect("head implies list");
    let Some(protocol_name) = items.get(1).and_then(SExpr::as_symbol) else {
        sink.err(LowerCode::ArityError, expr.span, "(defskeleton protocol ...) requires a protocol name");
        return Err(sink.0);
    };
    let body = &items[2..];
    let mut seen = Vec::new();
    let mut vars = Vec::new();
    let mut have_vars = false;
    for f in body.iter().filter(|f| f.head() == Some("vars")) {
        if have_vars {
            sink.err(LowerCode::MalformedVars, f.span, "duplicate (vars ...) form");
            continue;
        }
        have_vars = true;
        vars = lower_vars(f, &mut sink, &mut seen);
    }
    let lowerer = TermLowerer { allow_dh: true };
    let mut strands = Vec::new();
    let mut orig = Origination::default();
    let mut extra = Vec::new();
    for f in body {
        match f.head() {
            Some("vars") => {}
            Some("defstrand") => {
                if let Some(s) = lower_strand(f, &lowerer, &mut sink) {
                    strands.push(s);
                }
            }
            Some(h @ ("uniq-orig" | "non-orig" | "pen-non-orig")) => {
                let terms = lower_terms(&f.as_list().expect("list")[1..], &lowerer, &mut sink);
                orig.slot(h).expect("known slot").extend(terms);
            }
            _ => {
                sink.0.push(LowerDiagnostic::warning(
                    LowerCode::UnknownForm,
                    f.span,
                    format!("skeleton-level {}", describe(f)),
                ));
                extra.push(f.clone());
            }
        }
    }
    sink.finish(Skeleton {
        protocol_name: protocol_name.to_string(),
        vars,
        strands,
        uniq_orig: orig.uniq_orig,
        non_orig: orig.non_orig,
        pen_non_orig: orig.pen_non_orig,
        extra,
    })
}

/// Everything lowered from a multi-form CPSA file.
#[derive(Debug, Clone, Default)]
pub struct Document {
    pub protocols: Vec<Protocol>,
    pub skeletons: Vec<Skeleton>,
    pub diagnostics: Vec<LowerDiagnostic>,
}

impl Document {
    pub fn has_errors(&self) -> bool {
        self.diagnostics.iter().any(LowerDiagnostic::is_error)
    }

    pub fn protocol(&self, name: &str) -> Option<&Protocol> {
        self.protocols.iter().find(|p| p.name == name)
    }
}

/// Lowers every top-level form. `herald` and `comment` forms are skipped
/// silently; other unknown forms produce [`LowerCode::UnknownForm`] warnings.
pub fn lower_document(forms: &[SExpr]) -> Document {
    let mut doc = Document::default();
    for f in forms {
        match f.head() {
            Some("defprotocol") => match lower_protocol(f) {
                Ok(l) => {
                    doc.protocols.push(l.value);
                    doc.diagnostics.extend(l.warnings);
                }
                Err(d) => doc.diagnostics.extend(d),
            },
            Some("defskeleton") => match lower_skeleton(f) {
                Ok(l) => {
                    doc.skeletons.push(l.value);
                    doc.diagnostics.extend(l.warnings);
                }
                Err(d) => doc.diagnostics.extend(d),
            },
            Some("herald") | Some("comment") => {}
            _ => doc.diagnostics.push(LowerDiagnostic::warning(LowerCode::UnknownForm, f.span, describe(f))),
        }
    }
    doc
}

fn sym(s: &str) -> SExpr {
    SExpr::symbol(s)
}

fn tagged(head: &str, mut rest: Vec<SExpr>) -> SExpr {
    rest.insert(0, sym(head));
    SExpr::list(rest)
}

pub fn emit_term(t: &Term) -> SExpr {
    let all = |ts: &[Term]| ts.iter().map(emit_term).collect::<Vec<_>>();
    match t {
        Term::Var(v) => sym(v),
        Term::Tag(s) => SExpr::string(s.clone()),
        Term::Gen => tagged("gen", vec![]),
        Term::Enc { payloads, key } => {
            let mut args = all(payloads);
            args.push(emit_term(key));
            tagged("enc", args)
        }
        Term::Cat(p) => tagged("cat", all(p)),
        Term::Hash(p) => tagged("hash", all(p)),
        Term::Pubk(x) => tagged("pubk", vec![emit_term(x)]),
        Term::Privk(x) => tagged("privk", vec![emit_term(x)]),
        Term::Invk(x) => tagged("invk", vec![emit_term(x)]),
        Term::Ltk(a, b) => tagged("ltk", vec![emit_term(a), emit_term(b)]),
        Term::Exp(a, b) => tagged("exp", vec![emit_term(a), emit_term(b)]),
    }
}

fn emit_vars(vars: &[VarDecl]) -> SExpr {
    tagged(
        "vars",
        vars.iter()
            .map(|d| {
                let mut parts: Vec<SExpr> = d.names.iter().map(|n| sym(n)).collect();
                parts.push(sym(d.sort.as_str()));
                SExpr::list(parts)
            })
            .collect(),
    )
}

// Fixed declaration order: non-orig, pen-non-orig, uniq-orig.
fn emit_origination(out: &mut Vec<SExpr>, non: &[Term], pen: &[Term], uniq: &[Term]) {
    for (head, terms) in [("non-orig", non), ("pen-non-orig", pen), ("uniq-orig", uniq)] {
        if !terms.is_empty() {
            out.push(tagged(head, terms.iter().map(emit_term).collect()));
        }
    }
}

pub fn emit_role(r: &Role) -> SExpr {
    let trace =
        tagged("trace", r.trace.iter().map(|e| tagged(e.direction.as_str(), vec![emit_term(&e.payload)])).collect());
    let mut items = vec![sym(&r.name), emit_vars(&r.vars), trace];
    emit_origination(&mut items, &r.non_orig, &r.pen_non_orig, &r.uniq_orig);
    items.extend(r.extra.iter().cloned());
    tagged("defrole", items)
}

/// Canonical serializer for protocols; inverse of [`lower_protocol`].
pub fn emit_protocol(p: &Protocol) -> SExpr {
    let mut items = vec![sym(&p.name)];
    if p.algebra_explicit {
        items.push(sym(p.algebra.as_str()));
    }
    items.extend(p.roles.iter().map(emit_role));
    items.extend(p.extra.iter().cloned());
    tagged("defprotocol", items)
}

/// Like [`emit_protocol`] but always writes the algebra, inferred or not.
/// CPSA itself requires the algebra name.
pub fn emit_protocol_for_cpsa(p: &Protocol) -> SExpr {
    emit_protocol(&Protocol { algebra_explicit: true, ..p.clone() })
}

/// Canonical serializer for skeletons; inverse of [`lower_skeleton`].
pub fn emit_skeleton(s: &Skeleton) -> SExpr {
    let mut items = vec![sym(&s.protocol_name), emit_vars(&s.vars)];
    for st in &s.strands {
        let mut parts = vec![sym(&st.role), SExpr::int(st.height as i64)];
        parts.extend(st.bindings.iter().map(|(v, t)| SExpr::list(vec![sym(v), emit_term(t)])));
        items.push(tagged("defstrand", parts));
    }
    emit_origination(&mut items, &s.non_orig, &s.pen_non_orig, &s.uniq_orig);
    items.extend(s.extra.iter().cloned());
    tagged("defskeleton", items)
}

fn rename_sexpr(e: &SExpr, map: &HashMap<String, String>) -> SExpr {
    match &e.kind {
        SExprKind::Symbol(s) => match map.get(s) {
            Some(n) => SExpr { kind: SExprKind::Symbol(n.clone()), span: e.span },
            None => e.clone(),
        },
        SExprKind::List(items) => {
            SExpr { kind: SExprKind::List(items.iter().map(|i| rename_sexpr(i, map)).collect()), span: e.span }
        }
        _ => e.clone(),
    }
}

/// Renames each role's variables to `v0, v1, ...` in declaration order.
pub fn alpha_normalize(p: &Protocol) -> Protocol {
    let roles = p
        .roles
        .iter()
        .map(|r| {
            let map: HashMap<String, String> =
                r.declared().into_iter().enumerate().map(|(i, (n, _))| (n.to_string(), format!("v{i}"))).collect();
            let rn = |ts: &[Term]| ts.iter().map(|t| t.rename_vars(&map)).collect::<Vec<_>>();
            Role {
                name: r.name.clone(),
                vars: r
                    .vars
                    .iter()
                    .map(|d| VarDecl { names: d.names.iter().map(|n| map[n].clone()).collect(), sort: d.sort })
                    .collect(),
                trace: r
                    .trace
                    .iter()
                    .map(|e| Event { direction: e.direction, payload: e.payload.rename_vars(&map) })
                    .collect(),
                uniq_orig: rn(&r.uniq_orig),
                non_orig: rn(&r.non_orig),
                pen_non_orig: rn(&r.pen_non_orig),
                extra: r.extra.iter().map(|e| rename_sexpr(e, &map)).collect(),
            }
        })
        .collect();
    Protocol { roles, ..p.clone() }
}
