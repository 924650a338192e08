//! End-to-end runs of the command-line binary.

use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_detcal"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn d_ece(dir: &Path, input: &str, report: &str) -> f64 {
    ok(dir, &["eval", "--in", input, "--features", "conf+xy", "--out", report]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join(report)).unwrap()).unwrap();
    v["d_ece"].as_f64().unwrap()
}

#[test]
fn pipeline_reduces_positional_miscalibration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--scenario", "fig3_boundary_decay", "--n", "20000", "--out", "train.jsonl"]);
    ok(d, &["--seed", "7", "synth", "--scenario", "fig3_boundary_decay", "--n", "20000", "--out", "test.jsonl"]);
    ok(d, &["fit", "--in", "train.jsonl", "--method", "lc", "--features", "conf+xy", "--out", "model.json"]);
    ok(d, &["apply", "--model", "model.json", "--in", "test.jsonl", "--out", "calibrated.jsonl"]);

    let before = d_ece(d, "test.jsonl", "before.json");
    let after = d_ece(d, "calibrated.jsonl", "after.json");
    assert!(after < 0.5 * before, "before {before}, after {after}");

    let text = ok(d, &["eval", "--in", "calibrated.jsonl", "--features", "conf+xy"]);
    assert!(text.contains("D-ECE"), "{text}");
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["fit"]).status.code(), Some(1));
    assert_eq!(run(d, &["eval", "--in", "missing.jsonl"]).status.code(), Some(2));
    std::fs::write(d.join("bad.jsonl"), "{not json}\n").unwrap();
    assert_eq!(run(d, &["eval", "--in", "bad.jsonl"]).status.code(), Some(2));
}

#[test]
fn refuses_to_overwrite_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--scenario", "perfectly_calibrated", "--n", "500", "--out", "s.jsonl"]);
    ok(d, &["fit", "--in", "s.jsonl", "--method", "hb", "--out", "m.json"]);
    let before = std::fs::read(d.join("s.jsonl")).unwrap();
    assert_ne!(run(d, &["apply", "--model", "m.json", "--in", "s.jsonl", "--out", "s.jsonl"]).status.code(), Some(0));
    assert_eq!(std::fs::read(d.join("s.jsonl")).unwrap(), before);
}

#[test]
fn match_then_protocol_on_native_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut ann = String::new();
    let mut det = String::new();
    for i in 0..400 {
        let img = format!("im{i}");
        ann.push_str(&format!(
            "{{\"image\":{{\"image_id\":\"{img}\",\"width_px\":100,\"height_px\":100}}}}\n\
             {{\"image_id\":\"{img}\",\"category_id\":1,\"box\":{{\"cx\":0.5,\"cy\":0.5,\"w\":0.2,\"h\":0.2}}}}\n"
        ));
        let score = 0.3 + 0.6 * (i % 10) as f64 / 10.0;
        // every third detection misses its object entirely
        let cx = if i % 3 == 0 { 0.1 } else { 0.5 };
        det.push_str(&format!(
            "{{\"image_id\":\"{img}\",\"category_id\":1,\"score\":{score},\"box\":{{\"cx\":{cx},\"cy\":0.5,\"w\":0.2,\"h\":0.2}}}}\n"
        ));
    }
    std::fs::write(d.join("ann.jsonl"), ann).unwrap();
    std::fs::write(d.join("det.jsonl"), det).unwrap();
    ok(d, &["match", "--detections", "det.jsonl", "--annotations", "ann.jsonl", "--out", "m.jsonl"]);
    let matched = std::fs::read_to_string(d.join("m.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = matched.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 400);
    let hits = rows.iter().filter(|r| r["matched"].as_bool().unwrap()).count();
    assert_eq!(hits, 400 - 134);

    let table = ok(
        d,
        &["protocol", "--in", "m.jsonl", "--methods", "lc", "--features", "conf", "--reps", "2", "--format", "csv"],
    );
    assert!(table.lines().count() >= 3, "{table}");
}
