//! End-to-end run: sites, slices, verified summaries, API intents, verdict.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{api_fcgs, CallGraph, FunctionCallGraph};
use crate::deps::Threshold;
use crate::ir::{serialize_program, Callee, MethodId, Program};
use crate::llm::{text_digest, LlmClient, LlmConfig, LlmExchange};
use crate::reasoning::{
    summarize_function, tier2_intent, tier3_judge, ApiIntent, FcgInput, FunctionSummary, ReasoningConfig,
    ReasoningError, Verdict,
};
use crate::rules::{find_suspicious_sites, Category, RuleSet, SuspiciousApiSite};
use crate::slicer::{backward_slice, backward_slice_from, slice_to_text, InterSlice, SliceLimits, SlicingCriterion};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Rule catalog; the bundled catalog when absent.
    pub rules: Option<PathBuf>,
    pub theta: Threshold,
    pub max_revisions: u32,
    pub max_depth: usize,
    pub in_flight: usize,
    /// Replay script used instead of the HTTP backend.
    pub mock_script: Option<PathBuf>,
    pub llm: LlmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rules: None,
            theta: ReasoningConfig::default().threshold,
            max_revisions: 3,
            max_depth: 5,
            in_flight: 4,
            mock_script: None,
            llm: LlmConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig, ConfigError> {
        let config: PipelineConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.in_flight == 0 {
            return Err(ConfigError::Invalid("in_flight must be at least 1".into()));
        }
        self.llm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn reasoning(&self) -> ReasoningConfig {
        ReasoningConfig {
            threshold: self.theta,
            max_revisions: self.max_revisions,
        }
    }

    pub fn limits(&self) -> SliceLimits {
        SliceLimits {
            max_depth: self.max_depth,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
}

/// Why a function is summarised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitRole {
    /// Calls a suspicious API.
    Site,
    /// Reaches a suspicious API only through other functions.
    Context,
}

/// One function slice sent to Tier 1.
#[derive(Debug, Clone)]
pub struct Tier1Unit {
    pub role: UnitRole,
    pub slice: InterSlice,
}

impl Tier1Unit {
    pub fn key(&self) -> (MethodId, usize) {
        (self.slice.root.method.clone(), self.slice.root.criterion.statement_index)
    }
}

/// Slices for every site plus one context slice per call-graph node that is
/// not itself a direct caller.
pub fn plan_units(program: &Program, sites: &[SuspiciousApiSite], fcgs: &[FunctionCallGraph], limits: SliceLimits) -> Vec<Tier1Unit> {
    let mut units: BTreeMap<(MethodId, usize), Tier1Unit> = BTreeMap::new();
    for site in sites {
        let slice = backward_slice(program, site, limits);
        units
            .entry((site.method.clone(), site.instruction_index))
            .or_insert(Tier1Unit {
                role: UnitRole::Site,
                slice,
            });
    }
    for fcg in fcgs {
        for node in fcg.nodes.difference(&fcg.direct_callers) {
            let Some(index) = context_criterion(program, fcg, node) else { continue };
            let method = &program.methods[node];
            let criterion = SlicingCriterion::at_invoke(method, index).expect("call site is an invoke");
            units.entry((node.clone(), index)).or_insert_with(|| Tier1Unit {
                role: UnitRole::Context,
                slice: backward_slice_from(program, method, &criterion, limits),
            });
        }
    }
    units.into_values().collect()
}

/// Lowest-index call from `node` to one of its successors in the graph.
pub fn context_criterion(program: &Program, fcg: &FunctionCallGraph, node: &MethodId) -> Option<usize> {
    let successors: BTreeSet<&MethodId> = fcg.edges.iter().filter(|e| &e.caller == node).map(|e| &e.callee).collect();
    program.methods[node].body.iter().find_map(|ins| match ins.callee() {
        Some(Callee::Internal(callee)) if successors.contains(callee) => Some(ins.index),
        _ => None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteReport {
    #[serde(flatten)]
    pub site: SuspiciousApiSite,
    pub slice_digest: String,
    pub caller_slices: usize,
    pub depth: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub role: UnitRole,
    #[serde(flatten)]
    pub summary: FunctionSummary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentReport {
    #[serde(flatten)]
    pub intent: ApiIntent,
    pub fcgs: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeCounts {
    pub tier1: usize,
    pub tier2: usize,
    pub tier3: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRef {
    pub tier: crate::llm::Tier,
    pub digest: String,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub slicing_ms: u64,
    pub tier1_ms: u64,
    pub tier2_ms: u64,
    pub tier3_ms: u64,
    pub total_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub program_digest: String,
    pub verdict: Verdict,
    pub sites: Vec<SiteReport>,
    pub summaries: Vec<SummaryReport>,
    pub intents: Vec<IntentReport>,
    pub unverified_summaries: usize,
    pub exchanges: ExchangeCounts,
    pub transcripts: Vec<TranscriptRef>,
    pub timing: Timing,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

/// Everything a run produced; the report plus the material behind it.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: Report,
    pub exchanges: Vec<LlmExchange>,
    pub units: Vec<Tier1Unit>,
    pub fcgs: Vec<FunctionCallGraph>,
}

pub fn program_digest(program: &Program) -> String {
    text_digest(&serialize_program(program))
}

fn millis(since: Instant, deterministic: bool) -> u64 {
    if deterministic {
        0
    } else {
        since.elapsed().as_millis() as u64
    }
}

/// Tier-1 results in unit order. Units run on up to `workers` threads.
pub fn run_tier1(
    units: &[Tier1Unit],
    program: &Program,
    client: &LlmClient,
    config: &ReasoningConfig,
    workers: usize,
) -> Result<Vec<(FunctionSummary, Vec<LlmExchange>)>, ReasoningError> {
    type Slot = Option<Result<(FunctionSummary, Vec<LlmExchange>), ReasoningError>>;
    let slots: Mutex<Vec<Slot>> = Mutex::new((0..units.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, units.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= units.len() {
                    break;
                }
                let result = summarize_function(&units[i].slice, program, client, config);
                slots.lock().expect("slot lock")[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|slot| slot.expect("every unit ran"))
        .collect()
}

/// Call graphs of one API.
#[derive(Debug, Clone)]
pub struct ApiGroup {
    pub api: String,
    pub category: Category,
    pub fcgs: Vec<FunctionCallGraph>,
}

/// Static part of a run: sites, per-API call graphs in signature order, and
/// the Tier-1 units.
#[derive(Debug, Clone)]
pub struct AnalysisPlan {
    pub sites: Vec<SuspiciousApiSite>,
    pub apis: Vec<ApiGroup>,
    pub units: Vec<Tier1Unit>,
}

pub fn plan_analysis(program: &Program, rules: &RuleSet, limits: SliceLimits) -> AnalysisPlan {
    let sites = find_suspicious_sites(program, rules);
    let callgraph = CallGraph::build(program);
    let mut by_api: BTreeMap<&str, Vec<SuspiciousApiSite>> = BTreeMap::new();
    for site in &sites {
        by_api.entry(site.api_signature.as_str()).or_default().push(site.clone());
    }
    let apis: Vec<ApiGroup> = by_api
        .iter()
        .map(|(api, api_sites)| ApiGroup {
            api: api.to_string(),
            category: api_sites[0].category,
            fcgs: api_fcgs(&callgraph, api_sites),
        })
        .collect();
    let all_fcgs: Vec<FunctionCallGraph> = apis.iter().flat_map(|g| g.fcgs.iter().cloned()).collect();
    let units = plan_units(program, &sites, &all_fcgs, limits);
    AnalysisPlan { sites, apis, units }
}

pub fn run_pipeline(
    program: &Program,
    rules: &RuleSet,
    config: &PipelineConfig,
    client: &LlmClient,
) -> Result<PipelineOutcome, PipelineError> {
    let deterministic = client.deterministic();
    let started = Instant::now();
    let AnalysisPlan { sites, apis, units } = plan_analysis(program, rules, config.limits());
    let slicing_ms = millis(started, deterministic);

    let site_reports: Vec<SiteReport> = sites
        .iter()
        .map(|site| {
            let unit = units
                .iter()
                .find(|u| u.key() == (site.method.clone(), site.instruction_index))
                .expect("every site has a unit");
            SiteReport {
                site: site.clone(),
                slice_digest: text_digest(&slice_to_text(&unit.slice, program)),
                caller_slices: unit.slice.caller_slices.values().map(Vec::len).sum(),
                depth: unit.slice.depth,
                truncated: unit.slice.truncated,
            }
        })
        .collect();

    let tier1_started = Instant::now();
    let tier1 = run_tier1(&units, program, client, &config.reasoning(), config.in_flight)?;
    let tier1_ms = millis(tier1_started, deterministic);

    let mut exchanges: Vec<LlmExchange> = Vec::new();
    let mut summaries: Vec<SummaryReport> = Vec::new();
    for (unit, (summary, unit_exchanges)) in units.iter().zip(tier1) {
        exchanges.extend(unit_exchanges);
        summaries.push(SummaryReport {
            role: unit.role,
            summary,
        });
    }
    let tier1_count = exchanges.len();

    let tier2_started = Instant::now();
    let mut intents = Vec::new();
    for group in &apis {
        let (api, category, fcgs) = (group.api.as_str(), group.category, &group.fcgs);
        let inputs: Vec<FcgInput<'_>> = fcgs
            .iter()
            .map(|fcg| FcgInput {
                fcg,
                summaries: summaries
                    .iter()
                    .map(|s| &s.summary)
                    .filter(|s| fcg.nodes.contains(&s.method) && belongs_to(program, fcg, s))
                    .collect(),
            })
            .collect();
        let (intent, exchange) = tier2_intent(api, category, &inputs, client)?;
        exchanges.push(exchange);
        intents.push(IntentReport {
            intent,
            fcgs: fcgs.iter().map(FunctionCallGraph::edge_text).collect(),
        });
    }
    let tier2_ms = millis(tier2_started, deterministic);

    let tier3_started = Instant::now();
    let verdict = if intents.is_empty() {
        Verdict::indeterminate()
    } else {
        let api_intents: Vec<ApiIntent> = intents.iter().map(|i| i.intent.clone()).collect();
        let (verdict, tier3_exchanges) = tier3_judge(&api_intents, client)?;
        exchanges.extend(tier3_exchanges);
        verdict
    };
    let tier3_ms = millis(tier3_started, deterministic);

    let counts = ExchangeCounts {
        tier1: tier1_count,
        tier2: intents.len(),
        tier3: exchanges.len() - tier1_count - intents.len(),
        total: exchanges.len(),
    };
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        program_digest: program_digest(program),
        verdict,
        sites: site_reports,
        unverified_summaries: summaries.iter().filter(|s| !s.summary.verified).count(),
        summaries,
        intents,
        exchanges: counts,
        transcripts: exchanges
            .iter()
            .map(|e| TranscriptRef {
                tier: e.tier,
                digest: e.digest.clone(),
                cached: e.cached,
            })
            .collect(),
        timing: Timing {
            slicing_ms,
            tier1_ms,
            tier2_ms,
            tier3_ms,
            total_ms: millis(started, deterministic),
        },
    };
    Ok(PipelineOutcome {
        report,
        exchanges,
        fcgs: apis.into_iter().flat_map(|g| g.fcgs).collect(),
        units,
    })
}

/// A direct caller is described by its site summaries for this API; any other
/// node by the context summary on its call toward the API.
fn belongs_to(program: &Program, fcg: &FunctionCallGraph, summary: &FunctionSummary) -> bool {
    if fcg.direct_callers.contains(&summary.method) {
        program.methods[&summary.method]
            .instruction(summary.statement_index)
            .callee()
            .is_some_and(|c| c.signature().to_string() == fcg.api)
    } else {
        context_criterion(program, fcg, &summary.method) == Some(summary.statement_index)
    }
}
