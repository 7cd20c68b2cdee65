//! Prompt rendering and the three reasoning tiers: verified function
//! summaries, per-API intent, and the program verdict.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::FunctionCallGraph;
use crate::deps::{
    compute_drc, extract_dependencies, is_dependency_line, missed_kinds, parse_llm_dependencies, DependencyRecord,
    DrcResult, Threshold,
};
use crate::ir::{MethodId, Program};
use crate::llm::{text_digest, LlmClient, LlmError, LlmExchange, Tier};
use crate::rules::Category;
use crate::slicer::{slice_to_text, InterSlice};

pub const PERSONA: &str = include_str!("../prompts/persona.txt");
pub const TIER1_TEMPLATE: &str = include_str!("../prompts/tier1.txt");
pub const VERIFICATION_TEMPLATE: &str = include_str!("../prompts/verification.txt");
pub const TIER2_TEMPLATE: &str = include_str!("../prompts/tier2.txt");
pub const TIER2_FCG_TEMPLATE: &str = include_str!("../prompts/tier2_fcg.txt");
pub const TIER3_TEMPLATE: &str = include_str!("../prompts/tier3.txt");
pub const TIER3_API_TEMPLATE: &str = include_str!("../prompts/tier3_api.txt");
const REVISION_TEMPLATE: &str = include_str!("../prompts/revision.txt");
const TIER3_REMINDER: &str = include_str!("../prompts/tier3_reminder.txt");

/// Output format requested from the model for dependency lines.
pub const DEPENDENCY_TEMPLATE: &str = "<dependencies type>:<variable names>";

/// Stands in for the graph when the verification request follows the Tier-1 request.
pub const GRAPH_ABOVE: &str = "(the control flow graph above)";

#[derive(Debug, Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("empty value for prompt placeholder {{{0}}}")]
    EmptyPlaceholder(&'static str),
    #[error("no function summary for {method} in the call graph of {api}")]
    MissingSummary { api: String, method: MethodId },
    #[error("no API intents to judge")]
    NoIntents,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

impl Prompt {
    fn new(user: String) -> Prompt {
        Prompt {
            system: persona().to_string(),
            user,
        }
    }

    pub fn digest(&self) -> String {
        crate::llm::prompt_digest(&self.system, &self.user)
    }

    /// System and user text joined the way the prompt reads as one block.
    pub fn as_block(&self) -> String {
        format!("{} {}", self.system, self.user)
    }
}

fn persona() -> &'static str {
    PERSONA.trim_end()
}

/// Single-pass `{name}` substitution; substituted text is never rescanned,
/// and braces that do not name a known placeholder are left alone.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        for (name, value) in values {
            if let Some(tail) = after.strip_prefix(name).and_then(|t| t.strip_prefix('}')) {
                out.push_str(value);
                rest = tail;
                continue 'scan;
            }
        }
        out.push('{');
        rest = after;
    }
    out.push_str(rest);
    out
}

fn require<'a>(name: &'static str, value: &'a str) -> Result<&'a str, ReasoningError> {
    if value.trim().is_empty() {
        Err(ReasoningError::EmptyPlaceholder(name))
    } else {
        Ok(value)
    }
}

fn body(template: &str) -> &str {
    template.trim_end_matches('\n')
}

pub fn render_tier1_prompt(slice_text: &str) -> Result<Prompt, ReasoningError> {
    let cfg = require("CFG_content", slice_text.trim_end())?;
    Ok(Prompt::new(fill(body(TIER1_TEMPLATE), &[("CFG_content", cfg)])))
}

pub fn render_verification_prompt(slice_text: &str, invoked_name: &str) -> Result<Prompt, ReasoningError> {
    let cfg = require("CFG_content", slice_text.trim_end())?;
    let name = require("function_name", invoked_name)?;
    Ok(Prompt::new(fill(
        body(VERIFICATION_TEMPLATE),
        &[("function_name", name), ("template", DEPENDENCY_TEMPLATE), ("CFG_content", cfg)],
    )))
}

/// The Tier-1 request actually sent: the summary prompt followed by the
/// verification prompt, so one answer carries both summary and dependencies.
pub fn render_summary_request(slice_text: &str, invoked_name: &str) -> Result<Prompt, ReasoningError> {
    let tier1 = render_tier1_prompt(slice_text)?;
    let verification = render_verification_prompt(GRAPH_ABOVE, invoked_name)?;
    Ok(Prompt::new(format!("{}\n\n{}", tier1.user, verification.user)))
}

fn revision_note(attempt: u32, kinds: &str) -> String {
    fill(
        body(REVISION_TEMPLATE),
        &[("attempt", &attempt.to_string()), ("kinds", kinds)],
    )
}

fn indent_continuation(text: &str, pad: &str) -> String {
    text.trim().lines().collect::<Vec<_>>().join(&format!("\n{pad}"))
}

/// Summaries feeding one call graph, in node order.
#[derive(Debug, Clone)]
pub struct FcgInput<'a> {
    pub fcg: &'a FunctionCallGraph,
    pub summaries: Vec<&'a FunctionSummary>,
}

pub fn render_tier2_prompt(api: &str, category: Category, fcgs: &[FcgInput<'_>]) -> Result<Prompt, ReasoningError> {
    let api = require("API name", api)?;
    let mut blocks = Vec::new();
    for (i, input) in fcgs.iter().enumerate() {
        for node in &input.fcg.nodes {
            if !input.summaries.iter().any(|s| &s.method == node) {
                return Err(ReasoningError::MissingSummary {
                    api: api.to_string(),
                    method: node.clone(),
                });
            }
        }
        let template = body(TIER2_FCG_TEMPLATE);
        let (head, node_line) = template.rsplit_once('\n').expect("node line template");
        let fcg_text = indent_continuation(&input.fcg.edge_text(), "       ");
        let mut block = fill(head, &[("i", &(i + 1).to_string()), ("FCG_content", &fcg_text)]);
        for s in &input.summaries {
            let name = format!("{}:", s.method);
            let summary = indent_continuation(&s.summary, "    ");
            block.push('\n');
            block.push_str(&fill(node_line, &[("function_name", &name), ("function_summary", &summary)]));
        }
        blocks.push(block);
    }
    let category = category.to_string();
    Ok(Prompt::new(fill(
        body(TIER2_TEMPLATE),
        &[("API name", api), ("access/transfer", &category), ("FCG_blocks", &blocks.join("\n"))],
    )))
}

pub fn render_tier3_prompt(intents: &[ApiIntent]) -> Result<Prompt, ReasoningError> {
    if intents.is_empty() {
        return Err(ReasoningError::NoIntents);
    }
    let blocks: Vec<String> = intents
        .iter()
        .enumerate()
        .map(|(i, intent)| {
            let summary = indent_continuation(&intent.intent, "    ");
            fill(
                body(TIER3_API_TEMPLATE),
                &[
                    ("i", &(i + 1).to_string()),
                    ("API name", &intent.api_signature),
                    ("access/transfer", &intent.category.to_string()),
                    ("API summary", &summary),
                ],
            )
        })
        .collect();
    Ok(Prompt::new(fill(body(TIER3_TEMPLATE), &[("API_blocks", &blocks.join("\n"))])))
}

// ---------------------------------------------------------------------------
// Tier 1

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningConfig {
    pub threshold: Threshold,
    pub max_revisions: u32,
}

impl Default for ReasoningConfig {
    fn default() -> Self {
        ReasoningConfig {
            threshold: Threshold::default(),
            max_revisions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSummary {
    pub method: MethodId,
    pub statement_index: usize,
    pub slice_digest: String,
    pub summary: String,
    pub oracle: Vec<DependencyRecord>,
    pub answered: Vec<DependencyRecord>,
    pub drc: DrcResult,
    pub attempts: u32,
    pub verified: bool,
    /// Prompt digests of every attempt, in order.
    pub transcripts: Vec<String>,
}

/// Response text with the dependency listing removed.
pub fn summary_text(response: &str) -> String {
    let kept: Vec<&str> = response.lines().filter(|l| !is_dependency_line(l)).collect();
    let text = kept.join("\n").trim().to_string();
    if text.is_empty() {
        response.trim().to_string()
    } else {
        text
    }
}

/// Summarise the root function of `inter`, re-asking with a revision note
/// until the dependency answer reaches the threshold or attempts run out.
pub fn summarize_function(
    inter: &InterSlice,
    program: &Program,
    client: &LlmClient,
    config: &ReasoningConfig,
) -> Result<(FunctionSummary, Vec<LlmExchange>), ReasoningError> {
    let root = &inter.root;
    let method = &program.methods[&root.method];
    let criterion = &root.criterion;
    let invoked = method
        .instruction(criterion.statement_index)
        .callee()
        .map(|c| c.signature().to_string())
        .unwrap_or_else(|| root.method.to_string());
    let slice_text = slice_to_text(inter, program);
    let oracle = extract_dependencies(root, method, criterion);
    let base = render_summary_request(&slice_text, &invoked)?;

    let mut exchanges = Vec::new();
    let mut prompt = base.clone();
    let mut attempt = 1;
    loop {
        let exchange = client.exchange(Tier::Tier1, &prompt.system, &prompt.user)?;
        let answered = parse_llm_dependencies(&exchange.response).records;
        let drc = compute_drc(&oracle, &answered, config.threshold);
        let summary = summary_text(&exchange.response);
        exchanges.push(exchange);
        if drc.passed || attempt > config.max_revisions {
            let result = FunctionSummary {
                method: root.method.clone(),
                statement_index: criterion.statement_index,
                slice_digest: text_digest(&slice_text),
                summary,
                oracle,
                answered,
                drc,
                attempts: attempt,
                verified: drc.passed,
                transcripts: exchanges.iter().map(|e| e.digest.clone()).collect(),
            };
            return Ok((result, exchanges));
        }
        attempt += 1;
        let kinds: Vec<&str> = missed_kinds(&oracle, &answered).iter().map(|k| k.name()).collect();
        prompt = Prompt {
            system: base.system.clone(),
            user: format!("{}\n\n{}", base.user, revision_note(attempt, &kinds.join(", "))),
        };
    }
}

// ---------------------------------------------------------------------------
// Tier 2

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiIntent {
    pub api_signature: String,
    pub category: Category,
    pub intent: String,
    pub fcg_count: usize,
    pub transcript: String,
}

pub fn tier2_intent(
    api: &str,
    category: Category,
    fcgs: &[FcgInput<'_>],
    client: &LlmClient,
) -> Result<(ApiIntent, LlmExchange), ReasoningError> {
    assert!(!fcgs.is_empty(), "an API with sites has at least one call graph");
    let prompt = render_tier2_prompt(api, category, fcgs)?;
    let exchange = client.exchange(Tier::Tier2, &prompt.system, &prompt.user)?;
    let intent = ApiIntent {
        api_signature: api.to_string(),
        category,
        intent: exchange.response.trim().to_string(),
        fcg_count: fcgs.len(),
        transcript: exchange.digest.clone(),
    };
    Ok((intent, exchange))
}

// ---------------------------------------------------------------------------
// Tier 3

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum VerdictLabel {
    Malware,
    Benign,
    Indeterminate,
}

impl VerdictLabel {
    pub fn exit_code(self) -> i32 {
        match self {
            VerdictLabel::Benign => 0,
            VerdictLabel::Malware => 1,
            VerdictLabel::Indeterminate => 2,
        }
    }
}

impl std::fmt::Display for VerdictLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VerdictLabel::Malware => "MALWARE",
            VerdictLabel::Benign => "BENIGN",
            VerdictLabel::Indeterminate => "INDETERMINATE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    #[serde(rename = "iocs")]
    pub key_findings: Vec<String>,
    pub raw: String,
    pub attempts: u32,
}

impl Verdict {
    pub fn indeterminate() -> Verdict {
        Verdict {
            label: VerdictLabel::Indeterminate,
            key_findings: Vec::new(),
            raw: String::new(),
            attempts: 0,
        }
    }
}

fn strip_emphasis(line: &str) -> String {
    line.chars().filter(|c| !matches!(c, '*' | '_' | '`' | '#')).collect()
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)final\s+prediction\s*[:\-]?\s*(MALWARE|BENIGN)").expect("valid regex"))
}

fn bullet_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•+]|\d+[.)])\s+(.+?)\s*$").expect("valid regex"))
}

/// Label and key findings from a judgement, or `None` without a label line.
pub fn parse_verdict(text: &str) -> Option<(VerdictLabel, Vec<String>)> {
    let label = text.lines().find_map(|line| {
        let plain = strip_emphasis(line);
        let caps = label_regex().captures(&plain)?;
        Some(if caps[1].eq_ignore_ascii_case("malware") {
            VerdictLabel::Malware
        } else {
            VerdictLabel::Benign
        })
    })?;
    let mut findings = Vec::new();
    let mut in_findings = false;
    for line in text.lines() {
        if !in_findings {
            in_findings = strip_emphasis(line).to_ascii_lowercase().contains("key findings");
            continue;
        }
        // bullets first, so "* **x**" keeps its marker before emphasis is dropped
        if let Some(caps) = bullet_regex().captures(line) {
            let item = strip_emphasis(&caps[1]).trim().to_string();
            if !item.is_empty() {
                findings.push(item);
            }
        }
    }
    Some((label, findings))
}

/// One judgement plus at most one re-ask with a format reminder.
pub fn tier3_judge(intents: &[ApiIntent], client: &LlmClient) -> Result<(Verdict, Vec<LlmExchange>), ReasoningError> {
    let prompt = render_tier3_prompt(intents)?;
    let reminder = Prompt {
        system: prompt.system.clone(),
        user: format!("{}\n\n{}", prompt.user, body(TIER3_REMINDER)),
    };
    let mut exchanges = Vec::new();
    for (attempt, p) in [&prompt, &reminder].into_iter().enumerate() {
        let exchange = client.exchange(Tier::Tier3, &p.system, &p.user)?;
        let parsed = parse_verdict(&exchange.response);
        let raw = exchange.response.clone();
        exchanges.push(exchange);
        if let Some((label, key_findings)) = parsed {
            let verdict = Verdict {
                label,
                key_findings,
                raw,
                attempts: attempt as u32 + 1,
            };
            return Ok((verdict, exchanges));
        }
    }
    let raw = exchanges.last().map(|e| e.response.clone()).unwrap_or_default();
    Ok((
        Verdict {
            raw,
            attempts: 2,
            ..Verdict::indeterminate()
        },
        exchanges,
    ))
}
