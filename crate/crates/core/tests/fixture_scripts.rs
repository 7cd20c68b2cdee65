//! Mock scripts under `fixtures/` are generated from the plans below.
//! Run with `LAMD_REGEN_FIXTURES=1` to rewrite them after a prompt change.

use std::path::PathBuf;

use lamd::ir::parse_program;
use lamd::llm::MockScript;
use lamd::pipeline::PipelineConfig;
use lamd::rules::RuleSet;
use lamd_testkit::{build_mock_script, ScriptPlan};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn plan(summaries: &[(&str, &str)], intents: &[(&str, &str)], verdict: &str) -> ScriptPlan {
    ScriptPlan {
        summaries: summaries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        intents: intents.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        verdict: verdict.to_string(),
    }
}

fn smsreg_plan() -> ScriptPlan {
    plan(
        &[
            ("com.smsreg.MainActivity.onCreate/1", "On startup obtains the telephony service, collects device identifiers through DeviceInfo.collect and hands them to Registrar.register."),
            ("com.smsreg.DeviceInfo.collect/1", "Reads the IMEI with getDeviceId() and the IMSI with getSubscriberId(), then joins both into one string."),
            ("com.smsreg.Registrar.register/1", "Builds a registration message from its argument and sends it to a hard-coded number."),
            ("com.smsreg.Registrar.send/2", "Sends an SMS with sendTextMessage() to the given number when the message body is non-empty."),
        ],
        &[
            ("android.telephony.TelephonyManager.getDeviceId/0", "Reads the device IMEI so it can be embedded in an outgoing registration SMS."),
            ("android.telephony.TelephonyManager.getSubscriberId/0", "Reads the subscriber IMSI next to the IMEI for the same SMS payload."),
            ("android.telephony.SmsManager.sendTextMessage/5", "Silently texts the collected identifiers to the premium short code 7132."),
        ],
        "Final Prediction: MALWARE\n\nKey Findings:\n* Sensitive API Misuse: IMEI and IMSI are read without user interaction.\n* Data Exfiltration: both identifiers leave the device by SMS.\n* Premium SMS Fraud: the registration message targets short code 7132.\n",
    )
}

fn benign_plan() -> ScriptPlan {
    plan(
        &[
            ("com.notes.Diagnostics.onStart/1", "Calls logDevice once during startup."),
            ("com.notes.Diagnostics.logDevice/1", "Reads the IMEI with getDeviceId() and writes it to the local debug log."),
        ],
        &[(
            "android.telephony.TelephonyManager.getDeviceId/0",
            "Used only to write a diagnostics line to the local log. The value never leaves the device.",
        )],
        "Final Prediction: BENIGN\n\nKey Findings:\n- getDeviceId() output only reaches android.util.Log.\n- No network or SMS transmission is present.\n",
    )
}

fn dual_plan() -> ScriptPlan {
    plan(
        &[
            ("com.dual.Diagnostics.onStart/1", "Calls logDevice once during startup."),
            ("com.dual.Diagnostics.logDevice/1", "Reads the IMEI with getDeviceId() and writes it to the local debug log."),
            ("com.dual.Uploader.onSync/1", "Triggers sendImeiToServer on every sync."),
            ("com.dual.Uploader.sendImeiToServer/1", "Reads the IMEI and writes it into an HTTP connection opened to collector.example."),
        ],
        &[
            ("android.telephony.TelephonyManager.getDeviceId/0", "Two contexts. The diagnostics logger keeps the IMEI local, while sendImeiToServer uploads it to a remote collector."),
            ("java.net.URL.openConnection/0", "Opens the HTTP connection that carries the IMEI to collector.example."),
        ],
        "Final Prediction: MALWARE\n\nKey Findings:\n* Data Exfiltration: the IMEI is posted to http://collector.example/imei.\n* The logging use of getDeviceId() is benign on its own.\n",
    )
}

fn check(name: &str, plan: ScriptPlan) {
    let dir = fixtures();
    let program = parse_program(&std::fs::read_to_string(dir.join(format!("{name}.sir"))).unwrap()).unwrap();
    let script = build_mock_script(&program, &RuleSet::bundled(), &PipelineConfig::default(), &plan);
    let path = dir.join(format!("{name}.mock.json"));
    if std::env::var_os("LAMD_REGEN_FIXTURES").is_some() {
        std::fs::write(&path, script.to_json()).unwrap();
    }
    let on_disk = MockScript::load(&path).unwrap_or_else(|e| panic!("{e}; regenerate with LAMD_REGEN_FIXTURES=1"));
    assert_eq!(on_disk, script, "{} is stale; regenerate with LAMD_REGEN_FIXTURES=1", path.display());
}

#[test]
fn smsreg_script_current() {
    check("smsreg_mini", smsreg_plan());
}

#[test]
fn benign_script_current() {
    check("benign_logger", benign_plan());
}

#[test]
fn dual_script_current() {
    check("imei_dual", dual_plan());
}
