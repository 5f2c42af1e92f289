use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lexaudit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexaudit"))
        .current_dir(dir)
        .env_remove("LEXAUDIT_SCORER_TOKEN")
        .args(args)
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path) {
    let out = lexaudit(
        dir,
        &["synth", "--dir", "ws", "--docs-per-country", "2000", "--labeled", "1500", "--seed", "3"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_then_run_produces_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = lexaudit(tmp.path(), &["-c", "ws/config.toml", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for stage in ["phase1", "phase2", "scan-k", "metrics", "mitigate", "report"] {
        assert!(stdout.contains(&format!("{stage}: wrote")), "{stdout}");
    }
    let report = fs::read_to_string(tmp.path().join("ws/out/report/report.md")).unwrap();
    assert!(report.contains("| all |"));
}

#[test]
fn flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let run = |args: &[&str]| {
        let out = lexaudit(tmp.path(), args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["-c", "ws/config.toml", "--out", "alt", "phase1"]);
    run(&["-c", "ws/config.toml", "--out", "alt", "--k", "3", "--mode", "deviation", "phase2"]);
    let manifest = fs::read_to_string(tmp.path().join("ws/alt/phase2/manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["config"]["phase2"]["k"], 3);
    assert_eq!(v["config"]["phase2"]["mode"], "deviation");
    assert_eq!(v["config"]["output_dir"], "alt");

    run(&[
        "-c",
        "ws/config.toml",
        "--out",
        "alt",
        "--dataset",
        "dataset.jsonl",
        "--strategy",
        "substitution",
        "--target",
        "planta,plantb",
        "mitigate",
    ]);
    let m = fs::read_to_string(tmp.path().join("ws/alt/mitigate/manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&m).unwrap();
    assert_eq!(v["details"]["strategy"], "substitution");
    assert_eq!(v["details"]["terms"], serde_json::json!(["planta", "plantb"]));
}

#[test]
fn missing_config_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lexaudit(tmp.path(), &["-c", "nope.toml", "phase1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lexaudit phase1:"), "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "colour = 1\n").unwrap();
    let out = lexaudit(tmp.path(), &["-c", "c.toml", "report"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_with_input_code() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = lexaudit(tmp.path(), &["-c", "ws/config.toml", "metrics"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lexaudit metrics:") && err.contains("phase2"), "{err}");
}

#[test]
fn unreachable_remote_scorer_exits_with_remote_code() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("terms.txt"), "alpha\n").unwrap();
    fs::write(
        tmp.path().join("c.toml"),
        "terms = \"terms.txt\"\n\n[scorer.remote]\nendpoint = \"http://127.0.0.1:9/score\"\nretries = 0\ntimeout_ms = 500\n",
    )
    .unwrap();
    let out = lexaudit(tmp.path(), &["-c", "c.toml", "--k", "1", "phase2"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
