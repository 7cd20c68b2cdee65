use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use lamd::deps::extract_dependencies;
use lamd::llm::{prompt_digest, FnBackend, LlmClient, MockScript, RecordingBackend};
use lamd::pipeline::{plan_analysis, run_pipeline, PipelineConfig};
use lamd::reasoning::render_summary_request;
use lamd::rules::RuleSet;
use lamd::slicer::slice_to_text;
use lamd::Program;

/// Canned model answers for one fixture.
#[derive(Debug, Clone, Default)]
pub struct ScriptPlan {
    /// Summary prose per method id.
    pub summaries: BTreeMap<String, String>,
    /// Intent text per API signature.
    pub intents: BTreeMap<String, String>,
    pub verdict: String,
}

/// Tier-1 answers keyed by prompt digest: the plan's prose followed by the
/// exact oracle dependency lines, so every summary verifies first time.
pub fn tier1_answers(program: &Program, rules: &RuleSet, config: &PipelineConfig, plan: &ScriptPlan) -> HashMap<String, String> {
    let mut answers = HashMap::new();
    for unit in plan_analysis(program, rules, config.limits()).units {
        let root = &unit.slice.root;
        let method = &program.methods[&root.method];
        let invoked = method.body[root.criterion.statement_index]
            .callee()
            .expect("criterion is an invoke")
            .signature()
            .to_string();
        let prompt = render_summary_request(&slice_to_text(&unit.slice, program), &invoked).expect("prompt renders");
        let oracle = extract_dependencies(root, method, &root.criterion);
        let prose = plan
            .summaries
            .get(&root.method.to_string())
            .cloned()
            .unwrap_or_else(|| format!("{} prepares arguments for {invoked}.", root.method));
        let lines: String = oracle.iter().map(|r| format!("{r}\n")).collect();
        answers.insert(prompt.digest(), format!("{prose}\n\n{lines}"));
    }
    answers
}

/// Runs the pipeline against a scripted responder and returns the recording.
pub fn build_mock_script(program: &Program, rules: &RuleSet, config: &PipelineConfig, plan: &ScriptPlan) -> MockScript {
    let tier1 = tier1_answers(program, rules, config, plan);
    let plan = plan.clone();
    let responder = FnBackend::new(move |system, user| {
        if let Some(answer) = tier1.get(&prompt_digest(system, user)) {
            return answer.clone();
        }
        if user.starts_with("Analyze the main functionality") {
            let api = user
                .lines()
                .find_map(|l| l.strip_prefix("API name: "))
                .expect("tier 2 prompt names its API");
            return plan.intents.get(api).cloned().unwrap_or_else(|| panic!("no intent scripted for {api}"));
        }
        if user.starts_with("Determine whether") {
            return plan.verdict.clone();
        }
        panic!("unscripted prompt:\n{user}")
    });
    let recorder = Arc::new(RecordingBackend::new(Arc::new(responder)));
    let client = LlmClient::new(recorder.clone(), config.llm.model.clone(), config.in_flight);
    run_pipeline(program, rules, config, &client).expect("scripted run succeeds");
    recorder.script()
}
