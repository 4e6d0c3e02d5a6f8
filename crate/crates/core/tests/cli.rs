use std::path::Path;
use std::process::{Command, Output};

use flexquant::analyzer::SwitchPlan;

fn flexquant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexquant"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (model, plan, prompt, trace, csv) = (
        dir.path().join("m.bin"),
        dir.path().join("p.toml"),
        dir.path().join("prompt.txt"),
        dir.path().join("t.jsonl"),
        dir.path().join("t.csv"),
    );
    std::fs::write(&prompt, "Snow had covered the path\n").unwrap();
    assert!(flexquant(&["init-model", "--out", s(&model)])
        .status
        .success());
    let out = flexquant(&[
        "analyze",
        "--model",
        s(&model),
        "--bits",
        "8,4",
        "--out",
        s(&plan),
    ]);
    assert!(out.status.success());
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        table.lines().next().unwrap(),
        "layer_id,bits,kl,param_count"
    );
    assert_eq!(table.lines().count(), 1 + 48);
    assert_eq!(SwitchPlan::load(&plan).unwrap().len(), 48);

    let out = flexquant(&[
        "generate",
        "--model",
        s(&model),
        "--plan",
        s(&plan),
        "--prompt-file",
        s(&prompt),
        "--max-new",
        "45",
        "--theta",
        "inf",
        "--threshold-mode",
        "absolute",
        "--trace",
        s(&trace),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["tokens"].as_array().unwrap().len(), 45);
    assert_eq!(summary["switches"], 2);

    assert!(
        flexquant(&["report", "--trace", s(&trace), "--out", s(&csv)])
            .status
            .success()
    );
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 46);
    assert!(rows.lines().nth(20).unwrap().contains(",8,4"));
}

#[test]
fn errors_exit_non_zero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = flexquant(&["generate", "--model", s(&missing)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let prompt = dir.path().join("long.txt");
    std::fs::write(&prompt, "x".repeat(1000)).unwrap();
    let out = flexquant(&["generate", "--prompt-file", s(&prompt), "--max-new", "100"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("capacity"));

    let out = flexquant(&["generate", "--threshold-mode", "sometimes"]);
    assert!(!out.status.success());

    let out = flexquant(&[
        "bench",
        "--sweep",
        "0,5",
        "--max-new",
        "5",
        "--prompts",
        "1",
    ]);
    assert!(!out.status.success());
}

#[test]
fn eval_reports_bounded_metrics() {
    let out = flexquant(&[
        "eval",
        "--prompts",
        "2",
        "--max-new",
        "20",
        "--theta",
        "inf",
        "--threshold-mode",
        "absolute",
        "--window-len",
        "4",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((0.0..=100.0).contains(&r["rouge_l"].as_f64().unwrap()));
    assert!((0.0..=1.0).contains(&r["agreement_rate"].as_f64().unwrap()));
    assert!(r["perplexity"].as_f64().unwrap() >= 1.0);
    // No plan given, so nothing can switch.
    assert_eq!(r["effective_bits_final"], 8.0);
}
