use std::path::PathBuf;
use std::sync::Arc;

use lamd::ir::parse_program;
use lamd::llm::{LlmClient, MockBackend, MockScript, Tier};
use lamd::pipeline::{run_pipeline, PipelineConfig, PipelineOutcome, UnitRole};
use lamd::reasoning::VerdictLabel;
use lamd::rules::RuleSet;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(name: &str, script: Option<&str>) -> PipelineOutcome {
    let program = parse_program(&std::fs::read_to_string(fixtures().join(format!("{name}.sir"))).unwrap()).unwrap();
    let script = match script {
        Some(s) => MockScript::load(&fixtures().join(s)).unwrap(),
        None => MockScript::default(),
    };
    let client = LlmClient::new(Arc::new(MockBackend::new(script)), "gpt-4o-mini", 4);
    run_pipeline(&program, &RuleSet::bundled(), &PipelineConfig::default(), &client).unwrap()
}

fn assert_accounting(out: &PipelineOutcome) {
    let r = &out.report;
    let attempts: u32 = r.summaries.iter().map(|s| s.summary.attempts).sum();
    assert_eq!(r.exchanges.tier1, attempts as usize);
    assert_eq!(r.exchanges.tier2, r.intents.len());
    let tier3 = if r.intents.is_empty() { 0 } else { r.verdict.attempts as usize };
    assert_eq!(r.exchanges.tier3, tier3);
    assert_eq!(r.exchanges.total, attempts as usize + r.intents.len() + tier3);
    assert_eq!(r.transcripts.len(), r.exchanges.total);
    assert_eq!(out.exchanges.len(), r.exchanges.total);
}

#[test]
fn smsreg_is_malware_with_findings() {
    let out = run("smsreg_mini", Some("smsreg_mini.mock.json"));
    let r = &out.report;
    assert_eq!(r.verdict.label, VerdictLabel::Malware);
    assert_eq!(r.verdict.key_findings.len(), 3);
    assert_eq!(r.sites.len(), 3);
    assert_eq!(r.intents.len(), 3);
    assert!(r.summaries.iter().all(|s| s.summary.verified && s.summary.attempts == 1));
    assert_eq!(r.summaries.iter().filter(|s| s.role == UnitRole::Context).count(), 3);
    assert_eq!(r.exchanges.total, 6 + 3 + 1);
    assert_accounting(&out);
}

#[test]
fn every_site_has_one_slice_and_a_summary() {
    let out = run("smsreg_mini", Some("smsreg_mini.mock.json"));
    for site in &out.report.sites {
        let units: Vec<_> = out
            .units
            .iter()
            .filter(|u| u.key() == (site.site.method.clone(), site.site.instruction_index))
            .collect();
        assert_eq!(units.len(), 1);
        assert!(out
            .report
            .summaries
            .iter()
            .any(|s| s.summary.method == site.site.method && s.summary.statement_index == site.site.instruction_index));
    }
}

#[test]
fn send_site_resolves_through_two_caller_levels() {
    let out = run("smsreg_mini", Some("smsreg_mini.mock.json"));
    let send = out.report.sites.iter().find(|s| s.site.api_signature.contains("sendTextMessage")).unwrap();
    assert_eq!(send.depth, 2);
    assert!(!send.truncated);
}

#[test]
fn benign_logger_is_benign() {
    let out = run("benign_logger", Some("benign_logger.mock.json"));
    assert_eq!(out.report.verdict.label, VerdictLabel::Benign);
    assert_accounting(&out);
}

#[test]
fn dual_context_yields_two_graphs() {
    let out = run("imei_dual", Some("imei_dual.mock.json"));
    let imei = out
        .report
        .intents
        .iter()
        .find(|i| i.intent.api_signature.ends_with("getDeviceId/0"))
        .unwrap();
    assert_eq!(imei.intent.fcg_count, 2);
    let tier2 = out
        .exchanges
        .iter()
        .find(|e| e.tier == Tier::Tier2 && e.user.contains("getDeviceId"))
        .unwrap();
    assert!(tier2.user.contains("for 1-th Function Call Graph:"));
    assert!(tier2.user.contains("for 2-th Function Call Graph:"));
    assert!(tier2.user.contains("com.dual.Uploader.sendImeiToServer/1:"));
    assert!(tier2.user.contains("com.dual.Diagnostics.logDevice/1:"));
    assert_eq!(out.report.verdict.label, VerdictLabel::Malware);
}

#[test]
fn no_sites_no_exchanges() {
    let out = run("no_sites", None);
    assert_eq!(out.report.verdict.label, VerdictLabel::Indeterminate);
    assert_eq!(out.report.exchanges.total, 0);
    assert!(out.report.summaries.is_empty() && out.report.intents.is_empty());
}

#[test]
fn mock_runs_are_byte_identical() {
    let a = run("smsreg_mini", Some("smsreg_mini.mock.json")).report.to_json();
    let b = run("smsreg_mini", Some("smsreg_mini.mock.json")).report.to_json();
    assert_eq!(a, b);
    assert!(a.contains("\"total_ms\": 0"));
}

#[test]
fn unscripted_prompt_fails_loudly() {
    let program = parse_program(&std::fs::read_to_string(fixtures().join("smsreg_mini.sir")).unwrap()).unwrap();
    let client = LlmClient::new(Arc::new(MockBackend::new(MockScript::default())), "m", 1);
    let err = run_pipeline(&program, &RuleSet::bundled(), &PipelineConfig::default(), &client).unwrap_err();
    assert!(err.to_string().contains("no scripted response for prompt digest"), "{err}");
}
