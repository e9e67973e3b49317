//! Generic s-expressions: lexer, parser, balance scanner and canonical printer.
//!
//! The accepted token set is deliberately small: symbols, double-quoted
//! strings (only `\"` and `\\` escapes), decimal integers, parentheses and
//! `;` line comments. Quote, quasiquote, unquote and dotted pairs are
//! rejected with [`ParseError::IllegalCharacter`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Column at which the printer starts breaking lists over several lines.
pub const WRAP_COLUMN: usize = 80;

/// Half-open byte range into the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Span { start, end }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone)]
pub enum SExprKind {
    Symbol(String),
    Str(String),
    Int(i64),
    List(Vec<SExpr>),
}

/// An s-expression node with its source span.
///
/// Equality is structural and ignores spans.
#[derive(Debug, Clone)]
pub struct SExpr {
    pub kind: SExprKind,
    pub span: Span,
}

impl PartialEq for SExprKind {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (SExprKind::Symbol(a), SExprKind::Symbol(b)) => a == b,
            (SExprKind::Str(a), SExprKind::Str(b)) => a == b,
            (SExprKind::Int(a), SExprKind::Int(b)) => a == b,
            (SExprKind::List(a), SExprKind::List(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for SExprKind {}

impl PartialEq for SExpr {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
    }
}

impl Eq for SExpr {}

impl SExpr {
    pub fn symbol(name: impl Into<String>) -> Self {
        SExpr { kind: SExprKind::Symbol(name.into()), span: Span::default() }
    }

    pub fn string(value: impl Into<String>) -> Self {
        SExpr { kind: SExprKind::Str(value.into()), span: Span::default() }
    }

    pub fn int(value: i64) -> Self {
        SExpr { kind: SExprKind::Int(value), span: Span::default() }
    }

    pub fn list(items: Vec<SExpr>) -> Self {
        SExpr { kind: SExprKind::List(items), span: Span::default() }
    }

    pub fn as_symbol(&self) -> Option<&str> {
        match &self.kind {
            SExprKind::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[SExpr]> {
        match &self.kind {
            SExprKind::List(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self.kind {
            SExprKind::Int(v) => Some(v),
            _ => None,
        }
    }

    /// Head symbol of a list, if the list is nonempty and starts with a symbol.
    pub fn head(&self) -> Option<&str> {
        self.as_list().and_then(|items| items.first()).and_then(SExpr::as_symbol)
    }

    /// Number of nodes in the tree (every atom and every list counts once).
    pub fn node_count(&self) -> usize {
        match &self.kind {
            SExprKind::List(items) => 1 + items.iter().map(SExpr::node_count).sum::<usize>(),
            _ => 1,
        }
    }
}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_flat(self))
    }
}

/// Whether `name` is a legal symbol: nonempty printable ASCII without
/// whitespace, parentheses, quotes or comment markers, and not an integer.
pub fn is_valid_symbol(name: &str) -> bool {
    !name.is_empty() && name != "." && name.bytes().all(is_symbol_byte) && parse_integer(name).is_none()
}

fn is_symbol_byte(b: u8) -> bool {
    b.is_ascii_graphic() && !matches!(b, b'(' | b')' | b'"' | b';' | b'\'' | b'`' | b',')
}

fn parse_integer(text: &str) -> Option<i64> {
    let digits = text.strip_prefix('-').unwrap_or(text);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    text.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Warning => "warning",
            Severity::Error => "error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    /// `depth` is the open-paren surplus over the whole input; negative
    /// when closers outnumber openers.
    #[error("unbalanced parentheses at {span} (depth at end {depth})")]
    UnbalancedParen { span: Span, depth: i64 },
    #[error("unterminated string literal starting at {span}")]
    UnterminatedString { span: Span },
    #[error("illegal character {ch:?} at {span}")]
    IllegalCharacter { span: Span, ch: char },
}

impl ParseError {
    pub fn span(&self) -> Span {
        match self {
            ParseError::UnbalancedParen { span, .. }
            | ParseError::UnterminatedString { span }
            | ParseError::IllegalCharacter { span, .. } => *span,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ParseError::UnbalancedParen { .. } => "UnbalancedParen",
            ParseError::UnterminatedString { .. } => "UnterminatedString",
            ParseError::IllegalCharacter { .. } => "IllegalCharacter",
        }
    }

    pub fn to_diagnostic(&self) -> ParseDiagnostic {
        ParseDiagnostic { severity: Severity::Error, message: self.to_string(), span: self.span() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub severity: Severity,
    pub message: String,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    Open,
    Close,
    Atom(SExprKind),
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src, pos: 0 }
    }

    fn peek_char(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn skip_trivia(&mut self) {
        while let Some(c) = self.peek_char() {
            if c == ';' {
                match self.src[self.pos..].find('\n') {
                    Some(off) => self.pos += off + 1,
                    None => self.pos = self.src.len(),
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_token(&mut self) -> Result<Option<(Token, Span)>, ParseError> {
        self.skip_trivia();
        let start = self.pos;
        let Some(c) = self.peek_char() else { return Ok(None) };
        match c {
            '(' => {
                self.pos += 1;
                Ok(Some((Token::Open, Span::new(start, self.pos))))
            }
            ')' => {
                self.pos += 1;
                Ok(Some((Token::Close, Span::new(start, self.pos))))
            }
            '"' => self.string(start).map(Some),
            c if c.is_ascii() && is_symbol_byte(c as u8) => {
                let len = self.src[start..].bytes().take_while(|&b| is_symbol_byte(b)).count();
                self.pos += len;
                let text = &self.src[start..self.pos];
                let span = Span::new(start, self.pos);
                if text == "." {
                    return Err(ParseError::IllegalCharacter { span, ch: '.' });
                }
                let kind = match parse_integer(text) {
                    Some(v) => SExprKind::Int(v),
                    None => SExprKind::Symbol(text.to_string()),
                };
                Ok(Some((Token::Atom(kind), span)))
            }
            other => Err(ParseError::IllegalCharacter { span: Span::new(start, start + other.len_utf8()), ch: other }),
        }
    }

    fn string(&mut self, start: usize) -> Result<(Token, Span), ParseError> {
        let mut value = String::new();
        let mut chars = self.src[start + 1..].char_indices();
        while let Some((off, c)) = chars.next() {
            let at = start + 1 + off;
            match c {
                '"' => {
                    self.pos = at + 1;
                    return Ok((Token::Atom(SExprKind::Str(value)), Span::new(start, self.pos)));
                }
                '\\' => match chars.next() {
                    Some((_, e @ ('"' | '\\'))) => value.push(e),
                    Some((eoff, e)) => {
                        let eat = start + 1 + eoff;
                        return Err(ParseError::IllegalCharacter { span: Span::new(eat, eat + e.len_utf8()), ch: e });
                    }
                    None => break,
                },
                c if c.is_control() && !matches!(c, '\n' | '\t' | '\r') => {
                    return Err(ParseError::IllegalCharacter { span: Span::new(at, at + c.len_utf8()), ch: c });
                }
                c => value.push(c),
            }
        }
        Err(ParseError::UnterminatedString { span: Span::new(start, self.src.len()) })
    }
}

/// Parse every top-level s-expression in `input`, in order.
pub fn parse(input: &str) -> Result<Vec<SExpr>, ParseError> {
    let mut lexer = Lexer::new(input);
    // Each frame: opening span start and the items collected so far.
    let mut stack: Vec<(usize, Vec<SExpr>)> = Vec::new();
    let mut top = Vec::new();
    while let Some((tok, span)) = lexer.next_token()? {
        match tok {
            Token::Open => stack.push((span.start, Vec::new())),
            Token::Close => {
                let Some((start, items)) = stack.pop() else {
                    return Err(ParseError::UnbalancedParen { span, depth: balance_info(input).open_surplus });
                };
                let node = SExpr { kind: SExprKind::List(items), span: Span::new(start, span.end) };
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(node),
                    None => top.push(node),
                }
            }
            Token::Atom(kind) => {
                let node = SExpr { kind, span };
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(node),
                    None => top.push(node),
                }
            }
        }
    }
    if let Some((start, _)) = stack.first() {
        return Err(ParseError::UnbalancedParen { span: Span::new(*start, input.len()), depth: stack.len() as i64 });
    }
    Ok(top)
}

/// Parenthesis accounting over raw text, ignoring comments and string
/// interiors. Total: never fails, whatever the input.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Balance {
    /// Unmatched `(` minus unmatched `)`.
    pub open_surplus: i64,
    pub unmatched_open: usize,
    pub unmatched_close: usize,
    /// First unmatched `)` if any, else the outermost unclosed `(`, else an
    /// unterminated string.
    pub first_error_span: Option<Span>,
    pub first_unmatched_close: Option<usize>,
    pub unterminated_string: Option<Span>,
    /// The text ends inside a `;` comment, so closers appended directly
    /// would be commented out.
    pub ends_in_comment: bool,
}

pub fn balance_info(input: &str) -> Balance {
    let bytes = input.as_bytes();
    let mut open_positions: Vec<usize> = Vec::new();
    let mut unmatched_close = 0usize;
    let mut first_unmatched_close = None;
    let mut unterminated_string = None;
    let mut ends_in_comment = false;
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b';' => match input[i..].find('\n') {
                Some(off) => i += off + 1,
                None => {
                    ends_in_comment = true;
                    i = bytes.len();
                }
            },
            b'"' => {
                let start = i;
                i += 1;
                let mut closed = false;
                while i < bytes.len() {
                    match bytes[i] {
                        b'\\' => i += 2,
                        b'"' => {
                            i += 1;
                            closed = true;
                            break;
                        }
                        _ => i += 1,
                    }
                }
                if !closed {
                    unterminated_string = Some(Span::new(start, input.len()));
                    i = bytes.len();
                }
            }
            b'(' => {
                open_positions.push(i);
                i += 1;
            }
            b')' => {
                if open_positions.pop().is_none() {
                    unmatched_close += 1;
                    first_unmatched_close.get_or_insert(i);
                }
                i += 1;
            }
            _ => i += 1,
        }
    }
    let unmatched_open = open_positions.len();
    let first_error_span = first_unmatched_close
        .map(|p| Span::new(p, p + 1))
        .or_else(|| open_positions.first().map(|&p| Span::new(p, input.len())))
        .or(unterminated_string);
    Balance {
        open_surplus: unmatched_open as i64 - unmatched_close as i64,
        unmatched_open,
        unmatched_close,
        first_error_span,
        first_unmatched_close,
        unterminated_string,
        ends_in_comment,
    }
}

fn write_atom(out: &mut String, kind: &SExprKind) {
    match kind {
        SExprKind::Symbol(s) => out.push_str(s),
        SExprKind::Int(v) => out.push_str(&v.to_string()),
        SExprKind::Str(s) => {
            out.push('"');
            for c in s.chars() {
                if matches!(c, '"' | '\\') {
                    out.push('\\');
                }
                out.push(c);
            }
            out.push('"');
        }
        SExprKind::List(_) => unreachable!("lists are not atoms"),
    }
}

fn write_flat(out: &mut String, expr: &SExpr) {
    match &expr.kind {
        SExprKind::List(items) => {
            out.push('(');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write_flat(out, item);
            }
            out.push(')');
        }
        atom => write_atom(out, atom),
    }
}

/// Single-line rendering.
pub fn print_flat(expr: &SExpr) -> String {
    let mut out = String::new();
    write_flat(&mut out, expr);
    out
}

fn write_wrapped(out: &mut String, expr: &SExpr, indent: usize) {
    let flat = print_flat(expr);
    let items = match &expr.kind {
        SExprKind::List(items) if indent + flat.len() > WRAP_COLUMN && items.len() > 1 => items,
        _ => {
            out.push_str(&flat);
            return;
        }
    };
    // Leading atoms stay on the opening line: `(defrole alice`.
    let lead = items.iter().take_while(|i| i.as_list().is_none()).count().max(1);
    out.push('(');
    for (i, item) in items[..lead].iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write_wrapped(out, item, indent + 1);
    }
    for item in &items[lead..] {
        out.push('\n');
        out.extend(std::iter::repeat_n(' ', indent + 2));
        write_wrapped(out, item, indent + 2);
    }
    out.push(')');
}

/// Deterministic canonical rendering: flat when it fits in
/// [`WRAP_COLUMN`] columns, otherwise children on their own lines indented
/// two spaces per level.
pub fn print_canonical(expr: &SExpr) -> String {
    let mut out = String::new();
    write_wrapped(&mut out, expr, 0);
    out
}

/// Canonical rendering of a whole document: forms separated by a blank
/// line, trailing newline.
pub fn print_document(exprs: &[SExpr]) -> String {
    let mut out = String::new();
    for (i, e) in exprs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&print_canonical(e));
        out.push('\n');
    }
    out
}
