//! SIR: a small three-address intermediate representation.
//!
//! A program is a set of methods; each method body is a flat list of
//! instructions of seven kinds. The textual form is line oriented:
//!
//! ```text
//! entry com.example.Main.onCreate/0
//!
//! method com.example.Main.send/1 (imei) {
//!   r1 = invoke android.telephony.SmsManager.getDefault/0 ()
//!   r2 = const "5554"
//!   invoke [r1] android.telephony.SmsManager.sendTextMessage/5 (r2, r2, imei, r2, r2)
//!   return
//! }
//! ```
//!
//! `#` starts a comment, `;` may be used to put several statements on a line.
//! An instance call names its receiver in brackets before the signature; the
//! arity counts explicit arguments only.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const KEYWORDS: &[&str] = &["method", "entry", "const", "invoke", "if", "goto", "return"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IrError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("duplicate method {0}")]
    DuplicateMethod(MethodId),
    #[error("unresolved label `{label}` in {method}")]
    UnresolvedLabel { method: MethodId, label: String },
    #[error("variable `{var}` used before definition at {method}:{index}")]
    UseBeforeDef {
        method: MethodId,
        var: String,
        index: usize,
    },
    #[error("invalid method {method}: {message}")]
    InvalidMethod { method: MethodId, message: String },
    #[error("invalid method signature `{0}`")]
    BadSignature(String),
}

/// `class.name/param_count`. Ordered by class, then name, then arity.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodId {
    pub class_name: String,
    pub method_name: String,
    pub param_count: usize,
}

impl MethodId {
    pub fn new(class_name: impl Into<String>, method_name: impl Into<String>, param_count: usize) -> Self {
        Self {
            class_name: class_name.into(),
            method_name: method_name.into(),
            param_count,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}/{}", self.class_name, self.method_name, self.param_count)
    }
}

impl FromStr for MethodId {
    type Err = IrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IrError::BadSignature(s.to_string());
        let (qualified, arity) = s.rsplit_once('/').ok_or_else(bad)?;
        let param_count = arity.parse::<usize>().map_err(|_| bad())?;
        if !arity.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let (class_name, method_name) = qualified.rsplit_once('.').ok_or_else(bad)?;
        if class_name.is_empty() || method_name.is_empty() {
            return Err(bad());
        }
        Ok(MethodId::new(class_name, method_name, param_count))
    }
}

impl Serialize for MethodId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A local variable or parameter name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Var(pub String);

impl Var {
    pub fn new(name: impl Into<String>) -> Self {
        Var(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for Var {
    fn from(s: String) -> Self {
        Var(s)
    }
}

impl From<&str> for Var {
    fn from(s: &str) -> Self {
        Var(s.to_string())
    }
}

/// Target of an invoke. Internal callees resolve to a method of the program.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Callee {
    Internal(MethodId),
    External(MethodId),
}

impl Callee {
    pub fn signature(&self) -> &MethodId {
        match self {
            Callee::Internal(id) | Callee::External(id) => id,
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, Callee::External(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InstrKind {
    Const,
    Assign,
    BinOp,
    Invoke,
    If,
    Goto,
    Return,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Const { dst: Var, literal: String },
    Assign { dst: Var, src: Var },
    /// Arithmetic, comparisons and field/array accesses. `rhs` is absent for unary operators.
    BinOp { dst: Var, op: String, lhs: Var, rhs: Option<Var> },
    Invoke {
        dst: Option<Var>,
        receiver: Option<Var>,
        callee: Callee,
        args: Vec<Var>,
    },
    If { cond: Var, target: String },
    Goto { target: String },
    Return { value: Option<Var> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub index: usize,
    pub op: Op,
}

impl Instruction {
    pub fn kind(&self) -> InstrKind {
        match self.op {
            Op::Const { .. } => InstrKind::Const,
            Op::Assign { .. } => InstrKind::Assign,
            Op::BinOp { .. } => InstrKind::BinOp,
            Op::Invoke { .. } => InstrKind::Invoke,
            Op::If { .. } => InstrKind::If,
            Op::Goto { .. } => InstrKind::Goto,
            Op::Return { .. } => InstrKind::Return,
        }
    }

    pub fn def(&self) -> Option<&Var> {
        match &self.op {
            Op::Const { dst, .. } | Op::Assign { dst, .. } | Op::BinOp { dst, .. } => Some(dst),
            Op::Invoke { dst, .. } => dst.as_ref(),
            _ => None,
        }
    }

    /// Variables read, in operand order. For invokes the receiver comes first.
    pub fn uses(&self) -> Vec<&Var> {
        match &self.op {
            Op::Const { .. } | Op::Goto { .. } => vec![],
            Op::Assign { src, .. } => vec![src],
            Op::BinOp { lhs, rhs, .. } => std::iter::once(lhs).chain(rhs.iter()).collect(),
            Op::Invoke { receiver, args, .. } => receiver.iter().chain(args.iter()).collect(),
            Op::If { cond, .. } => vec![cond],
            Op::Return { value } => value.iter().collect(),
        }
    }

    pub fn callee(&self) -> Option<&Callee> {
        match &self.op {
            Op::Invoke { callee, .. } => Some(callee),
            _ => None,
        }
    }

    pub fn target(&self) -> Option<&str> {
        match &self.op {
            Op::If { target, .. } | Op::Goto { target } => Some(target),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Method {
    pub id: MethodId,
    pub params: Vec<Var>,
    pub body: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    /// Variables read without a visible definition. Only slice fragments carry these.
    pub undeclared: BTreeSet<Var>,
}

impl Method {
    pub fn instruction(&self, index: usize) -> &Instruction {
        &self.body[index]
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.get(label).copied()
    }

    pub fn is_param(&self, var: &Var) -> bool {
        self.params.contains(var)
    }

    /// Every variable mentioned by the method: params, defs and uses.
    pub fn variables(&self) -> BTreeSet<&Var> {
        let mut vars: BTreeSet<&Var> = self.params.iter().collect();
        for ins in &self.body {
            vars.extend(ins.def());
            vars.extend(ins.uses());
        }
        vars
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub methods: BTreeMap<MethodId, Method>,
    pub entry_hints: Vec<MethodId>,
}

impl Program {
    pub fn method(&self, id: &MethodId) -> Option<&Method> {
        self.methods.get(id)
    }

    /// All distinct external call signatures in the program.
    pub fn external_calls(&self) -> BTreeSet<&MethodId> {
        self.methods
            .values()
            .flat_map(|m| m.body.iter())
            .filter_map(|i| match i.callee() {
                Some(Callee::External(sig)) => Some(sig),
                _ => None,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Punct(char),
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn is_punct(c: char) -> bool {
    matches!(c, '{' | '}' | '(' | ')' | ',' | '=' | ':' | ';' | '[' | ']')
}

fn lex(text: &str) -> Result<Vec<Token>, IrError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let column = i + 1;
            if c == '#' {
                break;
            } else if c.is_whitespace() {
                i += 1;
            } else if is_punct(c) {
                out.push(Token { tok: Tok::Punct(c), line: line_no, column });
                i += 1;
            } else if c == '"' {
                let start = i;
                i += 1;
                let mut closed = false;
                while i < chars.len() {
                    match chars[i] {
                        '\\' => {
                            if i + 1 >= chars.len() || !matches!(chars[i + 1], '"' | '\\' | 'n' | 't' | 'r') {
                                return Err(IrError::Syntax {
                                    line: line_no,
                                    column: i + 1,
                                    message: "invalid escape in string literal".into(),
                                });
                            }
                            i += 2;
                        }
                        '"' => {
                            i += 1;
                            closed = true;
                            break;
                        }
                        _ => i += 1,
                    }
                }
                if !closed {
                    return Err(IrError::Syntax {
                        line: line_no,
                        column,
                        message: "unterminated string literal".into(),
                    });
                }
                out.push(Token {
                    tok: Tok::Str(chars[start..i].iter().collect()),
                    line: line_no,
                    column,
                });
            } else {
                let start = i;
                while i < chars.len() && !chars[i].is_whitespace() && !is_punct(chars[i]) && chars[i] != '"' && chars[i] != '#' {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Word(chars[start..i].iter().collect()),
                    line: line_no,
                    column,
                });
            }
        }
        out.push(Token {
            tok: Tok::Newline,
            line: line_no,
            column: chars.len() + 1,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
}

fn is_literal_word(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+' | '_'))
}

/// An invoke whose callee is not yet resolved against the program.
struct RawMethod {
    id: MethodId,
    params: Vec<Var>,
    body: Vec<Instruction>,
    labels: BTreeMap<String, usize>,
    label_refs: Vec<String>,
    line: usize,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn peek_tok(&self) -> Option<&Tok> {
        self.peek().map(|t| &t.tok)
    }

    fn err_at(&self, message: impl Into<String>) -> IrError {
        let (line, column) = match self.peek().or_else(|| self.toks.last()) {
            Some(t) => (t.line, t.column),
            None => (1, 1),
        };
        IrError::Syntax {
            line,
            column,
            message: message.into(),
        }
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn skip_newlines(&mut self) {
        while matches!(self.peek_tok(), Some(Tok::Newline) | Some(Tok::Punct(';'))) {
            self.pos += 1;
        }
    }

    fn expect_punct(&mut self, c: char) -> Result<(), IrError> {
        match self.peek_tok() {
            Some(Tok::Punct(p)) if *p == c => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err_at(format!("expected `{c}`"))),
        }
    }

    fn eat_punct(&mut self, c: char) -> bool {
        if matches!(self.peek_tok(), Some(Tok::Punct(p)) if *p == c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn word(&mut self, what: &str) -> Result<String, IrError> {
        match self.peek_tok() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => Err(self.err_at(format!("expected {what}"))),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), IrError> {
        match self.peek_tok() {
            Some(Tok::Word(w)) if w == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(self.err_at(format!("expected `{kw}`"))),
        }
    }

    fn var(&mut self) -> Result<Var, IrError> {
        let save = self.pos;
        let w = self.word("variable")?;
        if !is_identifier(&w) || KEYWORDS.contains(&w.as_str()) {
            self.pos = save;
            return Err(self.err_at(format!("invalid variable name `{w}`")));
        }
        Ok(Var(w))
    }

    fn label_name(&mut self) -> Result<String, IrError> {
        let save = self.pos;
        let w = self.word("label")?;
        if !is_identifier(&w) || KEYWORDS.contains(&w.as_str()) {
            self.pos = save;
            return Err(self.err_at(format!("invalid label `{w}`")));
        }
        Ok(w)
    }

    fn signature(&mut self) -> Result<MethodId, IrError> {
        let save = self.pos;
        let w = self.word("method signature")?;
        w.parse().map_err(|_| {
            self.pos = save;
            self.err_at(format!("invalid method signature `{w}`"))
        })
    }

    fn at_statement_end(&self) -> bool {
        matches!(
            self.peek_tok(),
            None | Some(Tok::Newline) | Some(Tok::Punct(';')) | Some(Tok::Punct('}'))
        )
    }

    fn end_statement(&mut self) -> Result<(), IrError> {
        if self.at_statement_end() {
            Ok(())
        } else {
            Err(self.err_at("expected end of statement"))
        }
    }

    fn var_list(&mut self) -> Result<Vec<Var>, IrError> {
        self.expect_punct('(')?;
        let mut vars = Vec::new();
        if self.eat_punct(')') {
            return Ok(vars);
        }
        loop {
            vars.push(self.var()?);
            if self.eat_punct(')') {
                return Ok(vars);
            }
            self.expect_punct(',')?;
        }
    }

    fn program(&mut self) -> Result<(Vec<RawMethod>, Vec<MethodId>), IrError> {
        let mut methods = Vec::new();
        let mut entries = Vec::new();
        loop {
            self.skip_newlines();
            match self.peek_tok() {
                None => break,
                Some(Tok::Word(w)) if w == "method" => methods.push(self.method()?),
                Some(Tok::Word(w)) if w == "entry" => {
                    self.pos += 1;
                    entries.push(self.signature()?);
                    self.end_statement()?;
                }
                _ => return Err(self.err_at("expected `method` or `entry`")),
            }
        }
        Ok((methods, entries))
    }

    fn method(&mut self) -> Result<RawMethod, IrError> {
        let line = self.peek().map(|t| t.line).unwrap_or(1);
        self.keyword("method")?;
        let id = self.signature()?;
        let params = if matches!(self.peek_tok(), Some(Tok::Punct('('))) {
            self.var_list()?
        } else {
            Vec::new()
        };
        self.expect_punct('{')?;
        let mut body = Vec::new();
        let mut labels = BTreeMap::new();
        let mut label_refs = Vec::new();
        loop {
            self.skip_newlines();
            match self.peek_tok() {
                Some(Tok::Punct('}')) => {
                    self.pos += 1;
                    break;
                }
                None => return Err(self.err_at("unexpected end of input, expected `}`")),
                _ => {}
            }
            // label definition
            if let (Some(Tok::Word(_)), Some(Tok::Punct(':'))) =
                (self.peek_tok(), self.toks.get(self.pos + 1).map(|t| &t.tok))
            {
                let name = self.label_name()?;
                self.pos += 1;
                if labels.insert(name.clone(), body.len()).is_some() {
                    return Err(IrError::InvalidMethod {
                        method: id.clone(),
                        message: format!("duplicate label `{name}`"),
                    });
                }
                continue;
            }
            let op = self.statement()?;
            if let Op::If { target, .. } | Op::Goto { target } = &op {
                label_refs.push(target.clone());
            }
            body.push(Instruction { index: body.len(), op });
            self.end_statement()?;
        }
        Ok(RawMethod {
            id,
            params,
            body,
            labels,
            label_refs,
            line,
        })
    }

    fn statement(&mut self) -> Result<Op, IrError> {
        let first = match self.peek_tok() {
            Some(Tok::Word(w)) => w.clone(),
            _ => return Err(self.err_at("expected statement")),
        };
        match first.as_str() {
            "if" => {
                self.pos += 1;
                let cond = self.var()?;
                self.keyword("goto")?;
                let target = self.label_name()?;
                Ok(Op::If { cond, target })
            }
            "goto" => {
                self.pos += 1;
                Ok(Op::Goto {
                    target: self.label_name()?,
                })
            }
            "return" => {
                self.pos += 1;
                let value = if self.at_statement_end() { None } else { Some(self.var()?) };
                Ok(Op::Return { value })
            }
            "invoke" => self.invoke(None),
            _ => {
                let dst = self.var()?;
                self.expect_punct('=')?;
                self.rhs(dst)
            }
        }
    }

    fn rhs(&mut self, dst: Var) -> Result<Op, IrError> {
        let head = self.word("expression")?;
        match head.as_str() {
            "const" => {
                let literal = match self.next() {
                    Some(Token { tok: Tok::Str(s), .. }) => s,
                    Some(Token { tok: Tok::Word(w), .. }) if is_literal_word(&w) => w,
                    _ => {
                        self.pos -= 1;
                        return Err(self.err_at("expected literal"));
                    }
                };
                Ok(Op::Const { dst, literal })
            }
            "invoke" => {
                self.pos -= 1;
                self.invoke(Some(dst))
            }
            _ if self.at_statement_end() => {
                if !is_identifier(&head) || KEYWORDS.contains(&head.as_str()) {
                    self.pos -= 1;
                    return Err(self.err_at(format!("invalid variable name `{head}`")));
                }
                Ok(Op::Assign { dst, src: Var(head) })
            }
            _ => {
                if !is_identifier(&head) || KEYWORDS.contains(&head.as_str()) {
                    self.pos -= 1;
                    return Err(self.err_at(format!("invalid operator `{head}`")));
                }
                let lhs = self.var()?;
                let rhs = if self.eat_punct(',') { Some(self.var()?) } else { None };
                Ok(Op::BinOp { dst, op: head, lhs, rhs })
            }
        }
    }

    fn invoke(&mut self, dst: Option<Var>) -> Result<Op, IrError> {
        self.keyword("invoke")?;
        let receiver = if self.eat_punct('[') {
            let r = self.var()?;
            self.expect_punct(']')?;
            Some(r)
        } else {
            None
        };
        let sig_pos = self.pos;
        let sig = self.signature()?;
        let args = self.var_list()?;
        if args.len() != sig.param_count {
            self.pos = sig_pos;
            return Err(self.err_at(format!(
                "{} expects {} argument(s), got {}",
                sig,
                sig.param_count,
                args.len()
            )));
        }
        Ok(Op::Invoke {
            dst,
            receiver,
            callee: Callee::External(sig),
            args,
        })
    }
}

/// Structural checks shared by whole methods and fragments.
fn check_structure(method: &RawMethod) -> Result<(), IrError> {
    let invalid = |message: String| IrError::InvalidMethod {
        method: method.id.clone(),
        message,
    };
    if method.params.len() != method.id.param_count {
        return Err(invalid(format!(
            "declares {} parameter(s) but signature arity is {}",
            method.params.len(),
            method.id.param_count
        )));
    }
    let mut seen = BTreeSet::new();
    for p in &method.params {
        if !seen.insert(p) {
            return Err(invalid(format!("duplicate parameter `{p}`")));
        }
    }
    for label in &method.label_refs {
        match method.labels.get(label) {
            Some(&idx) if idx < method.body.len() => {}
            _ => {
                return Err(IrError::UnresolvedLabel {
                    method: method.id.clone(),
                    label: label.clone(),
                })
            }
        }
    }
    for (name, &idx) in &method.labels {
        if idx >= method.body.len() {
            return Err(invalid(format!("label `{name}` does not precede an instruction")));
        }
    }
    let n = method.body.len();
    for ins in &method.body {
        if let Op::If { target, .. } = &ins.op {
            if ins.index + 1 >= n {
                return Err(invalid(format!("branch at {} has no fall-through", ins.index)));
            }
            if method.labels[target] == ins.index + 1 {
                return Err(invalid(format!(
                    "branch at {} targets its own fall-through",
                    ins.index
                )));
            }
        }
    }
    Ok(())
}

fn finish(raw: RawMethod, known: &BTreeSet<MethodId>, undeclared: BTreeSet<Var>) -> Method {
    let body = raw
        .body
        .into_iter()
        .map(|mut ins| {
            if let Op::Invoke { callee, .. } = &mut ins.op {
                let sig = callee.signature().clone();
                *callee = if known.contains(&sig) {
                    Callee::Internal(sig)
                } else {
                    Callee::External(sig)
                };
            }
            ins
        })
        .collect();
    Method {
        id: raw.id,
        params: raw.params,
        body,
        labels: raw.labels,
        undeclared,
    }
}

/// Variables that may be read on some path before any assignment.
/// Returns (index, var) pairs in index order.
fn undefined_uses(method: &Method) -> Vec<(usize, Var)> {
    let n = method.body.len();
    if n == 0 {
        return Vec::new();
    }
    let cfg = crate::cfg::Cfg::build(method);
    // maybe-defined-on-entry sets, forward union dataflow
    let mut defined_in: Vec<Option<BTreeSet<&Var>>> = vec![None; n];
    defined_in[0] = Some(method.params.iter().collect());
    let mut work = std::collections::VecDeque::from([0usize]);
    while let Some(i) = work.pop_front() {
        let mut out = defined_in[i].clone().unwrap_or_default();
        out.extend(method.body[i].def());
        for &s in cfg.successors(i) {
            let changed = match &mut defined_in[s] {
                None => {
                    defined_in[s] = Some(out.clone());
                    true
                }
                Some(entry) => {
                    let before = entry.len();
                    entry.extend(out.iter().copied());
                    entry.len() != before
                }
            };
            if changed && !work.contains(&s) {
                work.push_back(s);
            }
        }
    }
    let mut missing = Vec::new();
    for ins in &method.body {
        // unreachable code carries no obligation
        let Some(defined) = &defined_in[ins.index] else { continue };
        for u in ins.uses() {
            if !defined.contains(u) && !missing.iter().any(|(i, v)| *i == ins.index && v == u) {
                missing.push((ins.index, u.clone()));
            }
        }
    }
    missing
}

fn parse_raw(text: &str) -> Result<(Vec<RawMethod>, Vec<MethodId>), IrError> {
    let toks = lex(text)?;
    let mut parser = Parser { toks, pos: 0 };
    parser.program()
}

/// Parses a whole program. Every method must read only parameters or
/// variables assigned on some path to the use.
pub fn parse_program(text: &str) -> Result<Program, IrError> {
    let (raws, entry_hints) = parse_raw(text)?;
    let mut known = BTreeSet::new();
    for raw in &raws {
        if !known.insert(raw.id.clone()) {
            return Err(IrError::DuplicateMethod(raw.id.clone()));
        }
    }
    let mut methods = BTreeMap::new();
    for raw in raws {
        check_structure(&raw)?;
        let method = finish(raw, &known, BTreeSet::new());
        if let Some((index, var)) = undefined_uses(&method).into_iter().next() {
            return Err(IrError::UseBeforeDef {
                method: method.id.clone(),
                var: var.0,
                index,
            });
        }
        methods.insert(method.id.clone(), method);
    }
    Ok(Program { methods, entry_hints })
}

/// Parses a single method as a slice fragment: variables read without a
/// definition are recorded in `undeclared` instead of being rejected.
/// All callees are treated as external.
pub fn parse_fragment(text: &str) -> Result<Method, IrError> {
    let (mut raws, _) = parse_raw(text)?;
    if raws.len() != 1 {
        return Err(IrError::Syntax {
            line: raws.get(1).map(|r| r.line).unwrap_or(1),
            column: 1,
            message: format!("expected exactly one method, found {}", raws.len()),
        });
    }
    let raw = raws.remove(0);
    check_structure(&raw)?;
    let mut method = finish(raw, &BTreeSet::new(), BTreeSet::new());
    method.undeclared = undefined_uses(&method).into_iter().map(|(_, v)| v).collect();
    Ok(method)
}

// ---------------------------------------------------------------------------
// Serializer

fn join_vars(vars: &[Var]) -> String {
    vars.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(", ")
}

/// Renders a single instruction in source syntax.
pub fn render_instruction(ins: &Instruction) -> String {
    match &ins.op {
        Op::Const { dst, literal } => format!("{dst} = const {literal}"),
        Op::Assign { dst, src } => format!("{dst} = {src}"),
        Op::BinOp { dst, op, lhs, rhs: Some(rhs) } => format!("{dst} = {op} {lhs}, {rhs}"),
        Op::BinOp { dst, op, lhs, rhs: None } => format!("{dst} = {op} {lhs}"),
        Op::Invoke {
            dst,
            receiver,
            callee,
            args,
        } => {
            let mut s = String::new();
            if let Some(d) = dst {
                s.push_str(&format!("{d} = "));
            }
            s.push_str("invoke ");
            if let Some(r) = receiver {
                s.push_str(&format!("[{r}] "));
            }
            s.push_str(&format!("{} ({})", callee.signature(), join_vars(args)));
            s
        }
        Op::If { cond, target } => format!("if {cond} goto {target}"),
        Op::Goto { target } => format!("goto {target}"),
        Op::Return { value: Some(v) } => format!("return {v}"),
        Op::Return { value: None } => "return".to_string(),
    }
}

pub fn serialize_method(method: &Method) -> String {
    let mut out = format!("method {}", method.id);
    if !method.params.is_empty() {
        out.push_str(&format!(" ({})", join_vars(&method.params)));
    }
    if method.body.is_empty() {
        out.push_str(" { }\n");
        return out;
    }
    out.push_str(" {\n");
    let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &idx) in &method.labels {
        by_index.entry(idx).or_default().push(name);
    }
    for ins in &method.body {
        for name in by_index.get(&ins.index).into_iter().flatten() {
            out.push_str(&format!("{name}:\n"));
        }
        out.push_str("  ");
        out.push_str(&render_instruction(ins));
        out.push('\n');
    }
    out.push_str("}\n");
    out
}

/// Canonical text: entry hints first, then methods in id order separated by blank lines.
pub fn serialize_program(program: &Program) -> String {
    let mut parts = Vec::new();
    if !program.entry_hints.is_empty() {
        parts.push(
            program
                .entry_hints
                .iter()
                .map(|e| format!("entry {e}\n"))
                .collect::<String>(),
        );
    }
    parts.extend(program.methods.values().map(serialize_method));
    parts.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_method() {
        let p = parse_program(r#"method A.m/0 { r1 = const "x"; return r1 }"#).unwrap();
        assert_eq!(p.methods.len(), 1);
        let m = p.methods.values().next().unwrap();
        assert_eq!(m.body.len(), 2);
        assert_eq!(m.body[0].kind(), InstrKind::Const);
        assert_eq!(m.body[1].uses(), vec![&Var::from("r1")]);
    }

    #[test]
    fn empty_body_serializes_inline() {
        let p = parse_program("method A.m/0 {\n}\n").unwrap();
        assert_eq!(serialize_program(&p), "method A.m/0 { }\n");
    }

    #[test]
    fn unresolved_label_rejected() {
        let err = parse_program("method A.m/1 (r1) {\n if r1 goto L1\n return\n}").unwrap_err();
        assert!(matches!(err, IrError::UnresolvedLabel { ref label, .. } if label == "L1"), "{err}");
    }

    #[test]
    fn duplicate_method_rejected() {
        let err = parse_program("method A.m/0 { }\nmethod A.m/0 { }").unwrap_err();
        assert!(matches!(err, IrError::DuplicateMethod(_)));
    }

    #[test]
    fn use_before_def_rejected() {
        let err = parse_program("method A.m/0 {\n r1 = r2\n return\n}").unwrap_err();
        assert_eq!(
            err,
            IrError::UseBeforeDef {
                method: "A.m/0".parse().unwrap(),
                var: "r2".into(),
                index: 0
            }
        );
    }

    #[test]
    fn use_defined_on_one_path_only_is_accepted() {
        let src = "method A.m/1 (p) {\n if p goto L\n r1 = const 1\nL:\n invoke X.f/1 (r1)\n return\n}";
        // r1 is assigned on the fall-through path, so it may be defined at the use
        parse_program(src).unwrap();
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = parse_program("method A.m/0 {\n  r1 = const\n}").unwrap_err();
        match err {
            IrError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn arity_mismatch_rejected() {
        let err = parse_program("method A.m/0 {\n invoke X.f/2 ()\n}").unwrap_err();
        assert!(matches!(err, IrError::Syntax { .. }));
    }

    #[test]
    fn degenerate_branch_rejected() {
        let src = "method A.m/1 (p) {\n if p goto L\nL:\n return\n}";
        assert!(matches!(parse_program(src), Err(IrError::InvalidMethod { .. })));
        let src = "method A.m/1 (p) {\nL:\n if p goto L\n}";
        assert!(matches!(parse_program(src), Err(IrError::InvalidMethod { .. })));
    }

    #[test]
    fn internal_and_external_callees() {
        let src = "method A.main/0 {\n r1 = const 1\n invoke A.h/1 (r1)\n invoke [r1] x.Y.z/0 ()\n}\nmethod A.h/1 (p) { return }";
        let p = parse_program(src).unwrap();
        let main = &p.methods[&"A.main/0".parse().unwrap()];
        assert!(matches!(main.body[1].callee(), Some(Callee::Internal(_))));
        assert!(matches!(main.body[2].callee(), Some(Callee::External(_))));
        assert_eq!(main.body[2].uses(), vec![&Var::from("r1")]);
    }

    #[test]
    fn fragment_records_undeclared() {
        let m = parse_fragment("method F.f/0 {\n r2 = invoke [r3] X.getValue/0 ()\n invoke [r1] X.method/1 (r2)\n}").unwrap();
        let undeclared: Vec<_> = m.undeclared.iter().map(|v| v.as_str()).collect();
        assert_eq!(undeclared, vec!["r1", "r3"]);
    }

    #[test]
    fn canonical_form_of_handwritten_text() {
        let src = "# comment\nentry A.main/0\nmethod A.main/0 {  r1 = const \"a b\" ; r2 = add r1,r1\n  L1: if r2 goto L2\n r3 = neg r2\nL2:\n  return   r2 }\n";
        let p = parse_program(src).unwrap();
        let text = serialize_program(&p);
        assert_eq!(
            text,
            "entry A.main/0\n\nmethod A.main/0 {\n  r1 = const \"a b\"\n  r2 = add r1, r1\nL1:\n  if r2 goto L2\n  r3 = neg r2\nL2:\n  return r2\n}\n"
        );
        assert_eq!(parse_program(&text).unwrap(), p);
    }

    #[test]
    fn method_id_round_trip() {
        let id: MethodId = "android.telephony.TelephonyManager.getDeviceId/0".parse().unwrap();
        assert_eq!(id.class_name, "android.telephony.TelephonyManager");
        assert_eq!(id.method_name, "getDeviceId");
        assert_eq!(id.to_string(), "android.telephony.TelephonyManager.getDeviceId/0");
        assert!("noclass/0".parse::<MethodId>().is_err());
        assert!("A.m/x".parse::<MethodId>().is_err());
    }
}
