use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn lamd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lamd"))
        .args(args)
        .env_remove("OPENAI_API_KEY")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn analyze(fixture: &str, out: &Path, extra: &[&str]) -> Output {
    let program = fixtures().join(format!("{fixture}.sir"));
    let mock = fixtures().join(format!("{fixture}.mock.json"));
    let config = fixtures().join("lamd.toml");
    let mut args = vec!["analyze", s(&program), "--config", s(&config), "--out", s(out)];
    if mock.exists() {
        args.extend(["--mock", s(&mock)]);
    }
    args.extend(extra);
    lamd(&args)
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn malware_exits_one_and_writes_sidecar_transcripts() {
    let dir = scratch("malware");
    let out = dir.join("report.json");
    let o = analyze("smsreg_mini", &out, &[]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["schema_version"], 1);
    assert_eq!(r["verdict"]["label"], "MALWARE");
    for t in r["transcripts"].as_array().unwrap() {
        let path = dir.join("report.transcripts").join(format!("{}.json", t["digest"].as_str().unwrap()));
        let e: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(e["digest"], t["digest"]);
        assert!(!e["response"].as_str().unwrap().is_empty());
    }
}

#[test]
fn benign_exits_zero() {
    let dir = scratch("benign");
    let o = analyze("benign_logger", &dir.join("r.json"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn no_sites_exits_two_without_credentials() {
    let dir = scratch("nosites");
    let out = dir.join("r.json");
    let o = analyze("no_sites", &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(report(&out)["exchanges"]["total"], 0);
}

#[test]
fn missing_credential_is_operational_error() {
    let dir = scratch("nokey");
    let program = fixtures().join("smsreg_mini.sir");
    let o = lamd(&["analyze", s(&program), "--out", s(&dir.join("r.json"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("OPENAI_API_KEY"));
}

#[test]
fn bad_arguments_and_inputs_exit_above_two() {
    assert_eq!(lamd(&["frobnicate"]).status.code(), Some(3));
    assert_eq!(lamd(&["slice", "/nonexistent.sir"]).status.code(), Some(3));
    let dir = scratch("badrules");
    let rules = dir.join("rules.json");
    std::fs::write(&rules, "{not json").unwrap();
    let program = fixtures().join("smsreg_mini.sir");
    assert_eq!(lamd(&["deps", s(&program), "--rules", s(&rules)]).status.code(), Some(3));
    assert_eq!(lamd(&["--help"]).status.code(), Some(0));
}

#[test]
fn prompts_and_dot_files_are_written() {
    let dir = scratch("artifacts");
    let prompts = dir.join("prompts");
    let o = analyze("smsreg_mini", &dir.join("r.json"), &["--dump-prompts", s(&prompts), "--emit-dot"]);
    assert_eq!(o.status.code(), Some(1));
    let mut names: Vec<String> = std::fs::read_dir(&prompts)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 10);
    assert!(names[0].starts_with("001-tier1-") && names[9].starts_with("010-tier3-"));
    let dots: Vec<_> = std::fs::read_dir(dir.join("r.dot")).unwrap().collect();
    assert_eq!(dots.len(), 6);
}

#[test]
fn record_then_replay_reproduces_report() {
    let dir = scratch("record");
    let script = dir.join("script.json");
    let first = dir.join("a.json");
    assert_eq!(analyze("smsreg_mini", &first, &["--record", s(&script)]).status.code(), Some(1));
    let program = fixtures().join("smsreg_mini.sir");
    let second = dir.join("b.json");
    let o = lamd(&["analyze", s(&program), "--mock", s(&script), "--out", s(&second)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
}

#[test]
fn slice_and_deps_print_each_site() {
    let program = fixtures().join("smsreg_mini.sir");
    let o = lamd(&["slice", s(&program)]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.matches("# site ").count(), 3);
    assert!(text.contains("criterion: 5 {p1, p2, r1, r2}"));

    let o = lamd(&["deps", s(&program), "--site", "2"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Direct: p1, p2, r1, r2") && text.contains("Conditional: r3"), "{text}");

    let o = lamd(&["slice", s(&program), "--site", "0", "--emit-dot"]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("digraph"));
    assert_eq!(lamd(&["slice", s(&program), "--site", "9"]).status.code(), Some(3));
}

#[test]
fn verify_reports_each_summary() {
    let program = fixtures().join("smsreg_mini.sir");
    let mock = fixtures().join("smsreg_mini.mock.json");
    let o = lamd(&["verify", s(&program), "--mock", s(&mock)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8(o.stdout).unwrap().matches(" verified").count(), 6);
    let none = fixtures().join("no_sites.sir");
    assert_eq!(lamd(&["verify", s(&none)]).status.code(), Some(2));
}
