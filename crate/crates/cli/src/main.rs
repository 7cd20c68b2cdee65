use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lamd::cfg::Cfg;
use lamd::deps::extract_dependencies;
use lamd::ir::{parse_program, Program};
use lamd::llm::{HttpBackend, LlmBackend, LlmClient, LlmExchange, MockBackend, MockScript, RecordingBackend};
use lamd::pipeline::{plan_analysis, run_pipeline, run_tier1, AnalysisPlan, PipelineConfig, UnitRole};
use lamd::rules::{load_rules, RuleSet};
use lamd::slicer::{slice_to_text, InterSlice};
use tracing_subscriber::EnvFilter;

/// Exit status for failures that are not verdicts.
const OPERATIONAL_ERROR: u8 = 3;

#[derive(Parser)]
#[command(name = "lamd", version, about = "Slice suspicious API calls and judge them with a language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Inputs {
    /// Program in the textual IR.
    program: PathBuf,
    /// Suspicious API catalog (JSON). Overrides `rules` in the config.
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run all three tiers and write a report. Exit 0 benign, 1 malware, 2 indeterminate.
    Analyze {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        /// Replay model answers from a digest-keyed script instead of calling the endpoint.
        #[arg(long)]
        mock: Option<PathBuf>,
        /// Save every exchange of this run as a replay script.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Write each prompt as a text file into this directory.
        #[arg(long)]
        dump_prompts: Option<PathBuf>,
        /// Write Graphviz files for slices and call graphs next to the report.
        #[arg(long)]
        emit_dot: bool,
    },
    /// Print the backward slice of each suspicious call site.
    Slice {
        #[command(flatten)]
        inputs: Inputs,
        /// Only this site (0-based, in report order).
        #[arg(long)]
        site: Option<usize>,
        #[arg(long)]
        max_depth: Option<usize>,
        /// Print the root function's CFG with sliced nodes highlighted instead.
        #[arg(long)]
        emit_dot: bool,
    },
    /// Print the dependency records extracted from each slice.
    Deps {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        site: Option<usize>,
    },
    /// Run function summaries and the dependency check only.
    /// Exit 0 all verified, 1 some unverified, 2 nothing to verify.
    Verify {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
}

struct Loaded {
    program: Program,
    rules: RuleSet,
    config: PipelineConfig,
    config_dir: PathBuf,
}

fn load(inputs: &Inputs) -> Result<Loaded> {
    let (config, config_dir) = match &inputs.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let config = PipelineConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (config, dir)
        }
        None => (PipelineConfig::default(), PathBuf::new()),
    };
    let rules = match (&inputs.rules, &config.rules) {
        (Some(path), _) => read_rules(path)?,
        (None, Some(path)) => read_rules(&config_dir.join(path))?,
        (None, None) => RuleSet::bundled(),
    };
    let source = fs::read_to_string(&inputs.program).with_context(|| format!("reading {}", inputs.program.display()))?;
    let program = parse_program(&source).with_context(|| format!("parsing {}", inputs.program.display()))?;
    Ok(Loaded {
        program,
        rules,
        config,
        config_dir,
    })
}

fn read_rules(path: &Path) -> Result<RuleSet> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    load_rules(&bytes).with_context(|| format!("in {}", path.display()))
}

fn backend(loaded: &Loaded, mock: Option<&Path>) -> Result<Arc<dyn LlmBackend>> {
    let script = match (mock, &loaded.config.mock_script) {
        (Some(path), _) => Some(path.to_path_buf()),
        (None, Some(path)) => Some(loaded.config_dir.join(path)),
        (None, None) => None,
    };
    if let Some(path) = script {
        let script = MockScript::load(&path).with_context(|| format!("loading {}", path.display()))?;
        return Ok(Arc::new(MockBackend::new(script)));
    }
    Ok(Arc::new(HttpBackend::new(loaded.config.llm.clone())?))
}

fn file_stem(text: &str) -> String {
    text.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_transcripts(dir: &Path, exchanges: &[LlmExchange]) -> Result<()> {
    for e in exchanges {
        let text = serde_json::to_string_pretty(e)? + "\n";
        write_file(&dir.join(format!("{}.json", e.digest)), &text)?;
    }
    Ok(())
}

fn dump_prompts(dir: &Path, exchanges: &[LlmExchange]) -> Result<()> {
    for (i, e) in exchanges.iter().enumerate() {
        let tier = serde_json::to_value(e.tier)?;
        let name = format!("{:03}-{}-{}.txt", i + 1, tier.as_str().unwrap_or("tier"), &e.digest[..12]);
        write_file(&dir.join(name), &format!("{}\n\n{}\n", e.system, e.user))?;
    }
    Ok(())
}

fn slice_dot(program: &Program, inter: &InterSlice) -> String {
    let method = &program.methods[&inter.root.method];
    Cfg::build(method).to_dot_highlighting(method, &inter.root.indices)
}

fn emit_dot(dir: &Path, program: &Program, plan: &AnalysisPlan) -> Result<()> {
    for unit in plan.units.iter().filter(|u| u.role == UnitRole::Site) {
        let (method, index) = unit.key();
        let name = format!("slice-{}-{index}.dot", file_stem(&method.to_string()));
        write_file(&dir.join(name), &slice_dot(program, &unit.slice))?;
    }
    for group in &plan.apis {
        for (i, fcg) in group.fcgs.iter().enumerate() {
            let name = format!("fcg-{}-{i}.dot", file_stem(&group.api));
            write_file(&dir.join(name), &fcg.to_dot())?;
        }
    }
    Ok(())
}

fn analyze(
    inputs: &Inputs,
    out: &Path,
    mock: Option<&Path>,
    record: Option<&Path>,
    prompts: Option<&Path>,
    dot: bool,
) -> Result<u8> {
    let loaded = load(inputs)?;
    let inner = backend(&loaded, mock)?;
    let recorder = record.map(|_| Arc::new(RecordingBackend::new(inner.clone())));
    let backend: Arc<dyn LlmBackend> = match &recorder {
        Some(r) => r.clone(),
        None => inner,
    };
    let config = &loaded.config;
    let client = LlmClient::new(backend, config.llm.model.clone(), config.in_flight);
    let outcome = run_pipeline(&loaded.program, &loaded.rules, config, &client)?;

    write_file(out, &outcome.report.to_json())?;
    write_transcripts(&out.with_extension("transcripts"), &outcome.exchanges)?;
    if let (Some(path), Some(recorder)) = (record, &recorder) {
        write_file(path, &recorder.script().to_json())?;
    }
    if let Some(dir) = prompts {
        dump_prompts(dir, &outcome.exchanges)?;
    }
    if dot {
        let plan = plan_analysis(&loaded.program, &loaded.rules, config.limits());
        emit_dot(&out.with_extension("dot"), &loaded.program, &plan)?;
    }
    let verdict = &outcome.report.verdict;
    let label = serde_json::to_value(verdict.label)?;
    eprintln!(
        "{}: {} site(s), {} exchange(s), report at {}",
        label.as_str().unwrap_or_default(),
        outcome.report.sites.len(),
        outcome.report.exchanges.total,
        out.display()
    );
    Ok(verdict.label.exit_code() as u8)
}

fn selected_sites(plan: &AnalysisPlan, site: Option<usize>) -> Result<Vec<usize>> {
    match site {
        Some(i) if i >= plan.sites.len() => bail!("site {i} out of range; {} site(s) found", plan.sites.len()),
        Some(i) => Ok(vec![i]),
        None => Ok((0..plan.sites.len()).collect()),
    }
}

fn site_unit(plan: &AnalysisPlan, i: usize) -> &InterSlice {
    let site = &plan.sites[i];
    let key = (site.method.clone(), site.instruction_index);
    &plan.units.iter().find(|u| u.key() == key).expect("site unit").slice
}

fn slice(inputs: &Inputs, site: Option<usize>, max_depth: Option<usize>, dot: bool) -> Result<u8> {
    let mut loaded = load(inputs)?;
    if let Some(depth) = max_depth {
        loaded.config.max_depth = depth;
    }
    let plan = plan_analysis(&loaded.program, &loaded.rules, loaded.config.limits());
    for i in selected_sites(&plan, site)? {
        let s = &plan.sites[i];
        let inter = site_unit(&plan, i);
        println!("# site {i}: {} at {}[{}]", s.api_signature, s.method, s.instruction_index);
        if dot {
            print!("{}", slice_dot(&loaded.program, inter));
        } else {
            print!("{}", slice_to_text(inter, &loaded.program));
        }
    }
    Ok(0)
}

fn deps(inputs: &Inputs, site: Option<usize>) -> Result<u8> {
    let loaded = load(inputs)?;
    let plan = plan_analysis(&loaded.program, &loaded.rules, loaded.config.limits());
    for i in selected_sites(&plan, site)? {
        let s = &plan.sites[i];
        let root = &site_unit(&plan, i).root;
        let method = &loaded.program.methods[&root.method];
        println!("# site {i}: {} at {}[{}]", s.api_signature, s.method, s.instruction_index);
        for record in extract_dependencies(root, method, &root.criterion) {
            println!("{record}");
        }
    }
    Ok(0)
}

fn verify(inputs: &Inputs, mock: Option<&Path>) -> Result<u8> {
    let loaded = load(inputs)?;
    let config = &loaded.config;
    let plan = plan_analysis(&loaded.program, &loaded.rules, config.limits());
    if plan.units.is_empty() {
        eprintln!("no suspicious call sites");
        return Ok(2);
    }
    let client = LlmClient::new(backend(&loaded, mock)?, config.llm.model.clone(), config.in_flight);
    let results = run_tier1(&plan.units, &loaded.program, &client, &config.reasoning(), config.in_flight)?;
    let mut unverified = 0;
    for (summary, _) in &results {
        if !summary.verified {
            unverified += 1;
        }
        println!(
            "{}[{}] drc {}/{} attempts {} {}",
            summary.method,
            summary.statement_index,
            summary.drc.correct,
            summary.drc.total,
            summary.attempts,
            if summary.verified { "verified" } else { "unverified" }
        );
    }
    Ok(if unverified == 0 { 0 } else { 1 })
}

fn run(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Analyze {
            inputs,
            out,
            mock,
            record,
            dump_prompts,
            emit_dot,
        } => analyze(
            inputs,
            out,
            mock.as_deref(),
            record.as_deref(),
            dump_prompts.as_deref(),
            *emit_dot,
        ),
        Command::Slice {
            inputs,
            site,
            max_depth,
            emit_dot,
        } => slice(inputs, *site, *max_depth, *emit_dot),
        Command::Deps { inputs, site } => deps(inputs, *site),
        Command::Verify { inputs, mock } => verify(inputs, mock.as_deref()),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_env("LAMD_LOG").unwrap_or_else(|_| EnvFilter::new("warn")))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { OPERATIONAL_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(OPERATIONAL_ERROR)
        }
    }
}
