use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden").join(name)
}

fn omnistream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omnistream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_accepts_golden_traces() {
    for name in ["single_turn", "rollback", "barge_in"] {
        let out = omnistream(&["validate", "--trace", arg(&golden(&format!("{name}.trace.jsonl")))]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn validate_reports_violations_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(golden("single_turn.trace.jsonl")).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    // a third frame in the first packet
    lines.insert(4, r#"{"kind":"video_frame","version":1,"time_ms":700,"width":640,"height":480}"#);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = omnistream(&["validate", "--trace", arg(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frame count"));

    let garbage = dir.path().join("garbage.jsonl");
    fs::write(&garbage, "not json\n").unwrap();
    let out = omnistream(&["validate", "--trace", arg(&garbage)]);
    assert_eq!(out.status.code(), Some(2));

    let out = omnistream(&["run", "--trace", arg(&bad), "--out", arg(&dir.path().join("log.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_reproduces_golden_logs() {
    let dir = tempfile::tempdir().unwrap();
    for (name, config) in [("single_turn", "short.toml"), ("rollback", "short.toml"), ("barge_in", "long.toml")] {
        let log = dir.path().join(format!("{name}.log.jsonl"));
        for stress in [None, Some("7")] {
            let trace = golden(&format!("{name}.trace.jsonl"));
            let cfg = golden(config);
            let mut args = vec!["run", "--trace", arg(&trace), "--config", arg(&cfg), "--out", arg(&log)];
            if let Some(s) = stress {
                args.extend(["--stress-seed", s]);
            }
            let out = omnistream(&args);
            assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
            assert_eq!(fs::read(&log).unwrap(), fs::read(golden(&format!("{name}.log.jsonl"))).unwrap(), "{name}");
        }
    }
}

#[test]
fn metrics_report_and_plot_data() {
    let log = golden("barge_in.log.jsonl");
    let out = omnistream(&["metrics", "--log", arg(&log)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["turns"].as_array().unwrap().len(), 2);
    assert_eq!(report["truncated_turns"], 1);
    assert_eq!(report["latency_p50_ms"], 0);

    let out = omnistream(&["metrics", "--log", arg(&log), "--emit-plot-data"]);
    assert_eq!(out.status.code(), Some(0));
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("turn,endpoint_ms,speculative_ms,latency_ms,rollbacks,truncated"));
    assert_eq!(rows.next(), Some("0,2650,2300,0,0,true"));
    assert_eq!(rows.count(), 1);

    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("plot.csv");
    let out = omnistream(&["metrics", "--log", arg(&log), "--emit-plot-data", arg(&csv_path)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(&csv_path).unwrap(), csv);
}

#[test]
fn metrics_rejects_truncated_log() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(golden("single_turn.log.jsonl")).unwrap();
    let cut = dir.path().join("cut.jsonl");
    fs::write(&cut, &text[..text.len() - 10]).unwrap();
    let out = omnistream(&["metrics", "--log", arg(&cut)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn synth_then_run() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("conv.jsonl");
    let log = dir.path().join("conv.log.jsonl");
    let out = omnistream(&["synth", "--out", arg(&trace), "--turns", "12", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(omnistream(&["validate", "--trace", arg(&trace)]).status.code(), Some(0));
    let out = omnistream(&["run", "--trace", arg(&trace), "--out", arg(&log)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("12 turns"));
    let out = omnistream(&["metrics", "--log", arg(&log)]);
    assert_eq!(out.status.code(), Some(0));

    let scenario = dir.path().join("single.jsonl");
    let out = omnistream(&["synth", "--scenario", "single_turn", "--out", arg(&scenario)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read(&scenario).unwrap(), fs::read(golden("single_turn.trace.jsonl")).unwrap());
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[vad]\nendpoint_silence_ms = 900\n").unwrap();
    let trace = golden("single_turn.trace.jsonl");
    let out = omnistream(&["run", "--trace", arg(&trace), "--config", arg(&cfg), "--out", arg(&dir.path().join("l"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("600..=700"));
}
