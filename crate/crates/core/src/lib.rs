//! Static slicing and tiered LLM reasoning for detecting malicious use of
//! sensitive Android APIs in a simplified three-address IR.

pub mod callgraph;
pub mod cfg;
pub mod deps;
pub mod ir;
pub mod llm;
pub mod pipeline;
pub mod reasoning;
pub mod rules;
pub mod slicer;

pub use callgraph::{api_fcgs, CallEdge, CallGraph, FunctionCallGraph};
pub use cfg::Cfg;
pub use deps::{compute_drc, extract_dependencies, DependencyKind, DependencyRecord, DrcResult, Threshold};
pub use ir::{parse_fragment, parse_program, serialize_program, Instruction, IrError, Method, MethodId, Op, Program, Var};
pub use llm::{LlmBackend, LlmClient, LlmConfig, LlmError, LlmExchange, MockBackend, Tier};
pub use pipeline::{run_pipeline, PipelineConfig, PipelineOutcome, Report};
pub use reasoning::{ApiIntent, FunctionSummary, Verdict, VerdictLabel};
pub use rules::{find_suspicious_sites, load_rules, ApiRule, Category, RuleSet, SuspiciousApiSite};
pub use slicer::{backward_slice, InterSlice, Slice, SliceLimits, SlicingCriterion};
