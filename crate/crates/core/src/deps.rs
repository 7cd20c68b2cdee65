//! Ground-truth data dependencies of a slice, parsing of the dependency lines
//! a model answers with, and the coverage score between the two.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use num_rational::Ratio;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfg::Cfg;
use crate::ir::{Method, Op, Var};
use crate::slicer::{Slice, SlicingCriterion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DependencyKind {
    Direct,
    Transitive,
    Conditional,
    Parallel,
    Derived,
}

impl DependencyKind {
    pub const ALL: [DependencyKind; 5] = [
        DependencyKind::Direct,
        DependencyKind::Transitive,
        DependencyKind::Conditional,
        DependencyKind::Parallel,
        DependencyKind::Derived,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DependencyKind::Direct => "Direct",
            DependencyKind::Transitive => "Transitive",
            DependencyKind::Conditional => "Conditional",
            DependencyKind::Parallel => "Parallel",
            DependencyKind::Derived => "Derived",
        }
    }
}

impl fmt::Display for DependencyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DependencyRecord {
    pub kind: DependencyKind,
    pub variables: BTreeSet<Var>,
}

impl DependencyRecord {
    pub fn new<I, V>(kind: DependencyKind, variables: I) -> Self
    where
        I: IntoIterator<Item = V>,
        V: Into<Var>,
    {
        DependencyRecord {
            kind,
            variables: variables.into_iter().map(Into::into).collect(),
        }
    }
}

/// `<type>: v1, v2`
impl fmt::Display for DependencyRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vars = self.variables.iter().map(Var::as_str).collect::<Vec<_>>().join(", ");
        write!(f, "{}: {}", self.kind, vars)
    }
}

/// Definitions reaching the entry of each instruction, as instruction indices.
fn reaching_definitions(cfg: &Cfg, method: &Method) -> Vec<BTreeSet<usize>> {
    let n = method.body.len();
    let mut reach_in: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    let transfer = |i: usize, input: &BTreeSet<usize>| -> BTreeSet<usize> {
        match method.body[i].def() {
            Some(d) => input
                .iter()
                .copied()
                .filter(|&j| method.body[j].def() != Some(d))
                .chain(std::iter::once(i))
                .collect(),
            None => input.clone(),
        }
    };
    let mut queue: VecDeque<usize> = (0..n).collect();
    let mut queued = vec![true; n];
    while let Some(i) = queue.pop_front() {
        queued[i] = false;
        let out = transfer(i, &reach_in[i]);
        for &s in cfg.successors(i) {
            let before = reach_in[s].len();
            reach_in[s].extend(out.iter().copied());
            if reach_in[s].len() != before && !queued[s] {
                queued[s] = true;
                queue.push_back(s);
            }
        }
    }
    reach_in
}

/// The five dependency kinds of a slice, ordered by kind then variables.
pub fn extract_dependencies(slice: &Slice, method: &Method, criterion: &SlicingCriterion) -> Vec<DependencyRecord> {
    let cfg = Cfg::build(method);
    let mut records = Vec::new();

    if !criterion.variables.is_empty() {
        records.push(DependencyRecord {
            kind: DependencyKind::Direct,
            variables: criterion.variables.clone(),
        });
    }

    // follow def-use chains of sliced definitions back from the criterion
    let reach = reaching_definitions(&cfg, method);
    let mut flowing: BTreeSet<Var> = BTreeSet::new();
    let mut seen_defs = BTreeSet::new();
    let mut work: VecDeque<(usize, Var)> = criterion
        .variables
        .iter()
        .map(|v| (criterion.statement_index, v.clone()))
        .collect();
    while let Some((use_at, var)) = work.pop_front() {
        for &d in &reach[use_at] {
            if !slice.indices.contains(&d) || method.body[d].def() != Some(&var) || !seen_defs.insert(d) {
                continue;
            }
            for u in method.body[d].uses() {
                flowing.insert(u.clone());
                work.push_back((d, u.clone()));
            }
        }
    }
    let transitive: BTreeSet<Var> = flowing.difference(&criterion.variables).cloned().collect();
    if !transitive.is_empty() {
        records.push(DependencyRecord {
            kind: DependencyKind::Transitive,
            variables: transitive,
        });
    }

    let branches = cfg.control_relevant_branches(criterion.statement_index);
    for &i in &slice.indices {
        let op = &method.body[i].op;
        match op {
            Op::If { cond, .. } if branches.contains(&i) => {
                records.push(DependencyRecord::new(DependencyKind::Conditional, [cond.clone()]));
            }
            Op::BinOp {
                dst,
                lhs,
                rhs: Some(rhs),
                ..
            } if lhs != rhs => {
                records.push(DependencyRecord::new(
                    DependencyKind::Parallel,
                    [lhs.clone(), rhs.clone(), dst.clone()],
                ));
            }
            Op::BinOp { dst, lhs, .. } | Op::Assign { dst, src: lhs } => {
                records.push(DependencyRecord::new(DependencyKind::Derived, [lhs.clone(), dst.clone()]));
            }
            _ => {}
        }
    }
    records.sort();
    records
}

/// Dependency lines recovered from a model response.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDependencies {
    pub records: Vec<DependencyRecord>,
    /// Lines that start like a dependency line but whose variable list does not parse.
    pub malformed: Vec<String>,
}

fn line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*(?:[-*•]\s*|\d+[.)]\s*)?[*_`]*(direct|transitive|conditional|parallel|derived)[*_`]*\s*:\s*(.*?)\s*$")
            .expect("valid regex")
    })
}

fn parse_variable_list(list: &str) -> Option<BTreeSet<Var>> {
    let trimmed = list.trim().trim_end_matches('.');
    let inner = trimmed
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .unwrap_or(trimmed);
    let mut vars = BTreeSet::new();
    for token in inner.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let token = token.trim_matches('`');
        let mut chars = token.chars();
        let ok = matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$')
            && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$');
        if !ok {
            return None;
        }
        vars.insert(Var::new(token));
    }
    (!vars.is_empty()).then_some(vars)
}

/// Tolerant line parser for `<type>: <variables>`; never fails.
pub fn parse_llm_dependencies(text: &str) -> ParsedDependencies {
    let mut parsed = ParsedDependencies::default();
    for line in text.lines() {
        let Some(caps) = line_regex().captures(line) else { continue };
        let kind = match caps[1].to_ascii_lowercase().as_str() {
            "direct" => DependencyKind::Direct,
            "transitive" => DependencyKind::Transitive,
            "conditional" => DependencyKind::Conditional,
            "parallel" => DependencyKind::Parallel,
            _ => DependencyKind::Derived,
        };
        match parse_variable_list(&caps[2]) {
            Some(variables) => parsed.records.push(DependencyRecord { kind, variables }),
            None => parsed.malformed.push(line.trim().to_string()),
        }
    }
    parsed
}

/// True when `line` is a dependency line (well formed or not).
pub fn is_dependency_line(line: &str) -> bool {
    line_regex().is_match(line)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ThresholdError {
    #[error("threshold must satisfy 0 < θ <= 1, got {0}")]
    OutOfRange(String),
    #[error("threshold `{0}` is not a decimal number")]
    NotDecimal(String),
}

/// Reliability threshold θ held as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold(Ratio<u64>);

impl Threshold {
    pub fn new(numer: u64, denom: u64) -> Result<Threshold, ThresholdError> {
        if denom == 0 || numer == 0 || numer > denom {
            return Err(ThresholdError::OutOfRange(format!("{numer}/{denom}")));
        }
        Ok(Threshold(Ratio::new(numer, denom)))
    }

    pub fn ratio(&self) -> Ratio<u64> {
        self.0
    }

    pub fn as_f64(&self) -> f64 {
        *self.0.numer() as f64 / *self.0.denom() as f64
    }

    /// Converts through the shortest decimal rendering, so `0.95` becomes 19/20.
    pub fn from_f64(value: f64) -> Result<Threshold, ThresholdError> {
        if !value.is_finite() {
            return Err(ThresholdError::NotDecimal(value.to_string()));
        }
        format!("{value}").parse()
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold(Ratio::new(19, 20))
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_f64())
    }
}

impl FromStr for Threshold {
    type Err = ThresholdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ThresholdError::NotDecimal(s.to_string());
        let s = s.trim();
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() {
            return Err(bad());
        }
        if !int.bytes().all(|b| b.is_ascii_digit()) || !frac.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 18 {
            return Err(bad());
        }
        let denom = 10u64.pow(frac.len() as u32);
        let int_part: u64 = if int.is_empty() { 0 } else { int.parse().map_err(|_| bad())? };
        let frac_part: u64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        let numer = int_part
            .checked_mul(denom)
            .and_then(|v| v.checked_add(frac_part))
            .ok_or_else(bad)?;
        Threshold::new(numer, denom).map_err(|_| ThresholdError::OutOfRange(s.to_string()))
    }
}

impl Serialize for Threshold {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_f64())
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Threshold::from_f64(v),
            Raw::Text(s) => s.parse(),
        }
        .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrcResult {
    pub correct: u64,
    pub total: u64,
    pub value: f64,
    pub passed: bool,
}

impl DrcResult {
    /// Exact coverage as a fraction; 1 for an empty oracle.
    pub fn ratio(&self) -> Ratio<u64> {
        if self.total == 0 {
            Ratio::from_integer(1)
        } else {
            Ratio::new(self.correct, self.total)
        }
    }
}

/// Share of oracle records the answer reproduces with the same kind and
/// exactly the same variables. Passing means coverage >= θ.
pub fn compute_drc(oracle: &[DependencyRecord], answered: &[DependencyRecord], threshold: Threshold) -> DrcResult {
    let total = oracle.len() as u64;
    if total == 0 {
        return DrcResult {
            correct: 0,
            total: 0,
            value: 1.0,
            passed: true,
        };
    }
    let answered: BTreeSet<&DependencyRecord> = answered.iter().collect();
    let correct = oracle.iter().filter(|r| answered.contains(r)).count() as u64;
    let theta = threshold.ratio();
    let passed = correct as u128 * *theta.denom() as u128 >= *theta.numer() as u128 * total as u128;
    DrcResult {
        correct,
        total,
        value: correct as f64 / total as f64,
        passed,
    }
}

/// Kinds with at least one oracle record the answer missed, in kind order.
pub fn missed_kinds(oracle: &[DependencyRecord], answered: &[DependencyRecord]) -> Vec<DependencyKind> {
    let answered: BTreeSet<&DependencyRecord> = answered.iter().collect();
    let missed: BTreeSet<DependencyKind> = oracle.iter().filter(|r| !answered.contains(r)).map(|r| r.kind).collect();
    missed.into_iter().collect()
}
