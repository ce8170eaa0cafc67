use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn dlmuq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlmuq"))
        .args(args)
        .env_remove("DLMUQ_SIM_ENDPOINT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "simulate", "--vocab-size", "3", "--length", "4", "--steps", "4", "--dist", "dirichlet:0.5",
        "--seed", "9", "--n-traces", "30", "--out-dir", s(dir),
    ];
    args.extend_from_slice(extra);
    let o = dlmuq(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("traces.jsonl")
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn simulate_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    simulate(a.path(), &["--blocks", "2"]);
    simulate(b.path(), &["--blocks", "2", "--jobs", "1"]);
    for f in ["traces.jsonl", "theorem.json", "sim_config.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(a.path().join("theorem.json")).unwrap()).unwrap();
    assert_eq!(report["inequality_holds"], true);
    assert_eq!(report["samples"], 0);
}

#[test]
fn simulate_reports_enumeration_bound() {
    let dir = TempDir::new().unwrap();
    let o = dlmuq(&[
        "simulate", "--vocab-size", "8", "--length", "6", "--steps", "2", "--n-traces", "1", "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("monte_carlo"), "{}", stderr(&o));
    assert!(!dir.path().join("traces.jsonl").exists());
}

#[test]
fn simulate_monte_carlo_gzip() {
    let dir = TempDir::new().unwrap();
    let o = dlmuq(&[
        "simulate", "--vocab-size", "2", "--length", "3", "--steps", "2", "--loss-mode", "monte_carlo",
        "--theorem-samples", "500", "--n-traces", "5", "--gzip", "--out-dir", s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let gz = dir.path().join("traces.jsonl.gz");
    assert_eq!(&fs::read(&gz).unwrap()[..2], &[0x1f, 0x8b]);
    assert_eq!(code(&dlmuq(&["validate", s(&gz)])), 0);
}

#[test]
fn validate_flags_broken_traces() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &[]);
    assert_eq!(code(&dlmuq(&["validate", s(&traces)])), 0);

    let text = fs::read_to_string(&traces).unwrap();
    let mut rows: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: Value = serde_json::from_str(&rows[3]).unwrap();
    rec["nfe"] = Value::from(99);
    rows[3] = rec.to_string();
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, rows.join("\n")).unwrap();
    let o = dlmuq(&["validate", s(&broken)]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("sim-000002"), "{out}");

    assert_eq!(code(&dlmuq(&["validate", "/no/such/file.jsonl"])), 2);
}

#[test]
fn score_writes_ordered_reports() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &["--blocks", "2"]);
    let (one, many) = (dir.path().join("one.jsonl"), dir.path().join("many.jsonl"));
    let o = dlmuq(&["score", "--jobs", "1", "--out", s(&one), s(&traces)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&dlmuq(&["score", "--jobs", "4", "--out", s(&many), s(&traces)])), 0);
    assert_eq!(fs::read(&one).unwrap(), fs::read(&many).unwrap());
    let reports = lines(&one);
    assert_eq!(reports.len(), 30);
    for (i, r) in reports.iter().enumerate() {
        assert_eq!(r["instance_id"], format!("sim-{i:06}"));
        let signals = r["signals"].as_object().unwrap();
        assert!(signals.len() >= 7);
        assert!(signals.contains_key("d_cocoa_l") && signals.contains_key("d_cocoa_g"));
    }
}

#[test]
fn score_marks_undefined_signals() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &["--mc-samples", "0"]);
    let out = dir.path().join("r.jsonl");
    let o = dlmuq(&["score", "--signals", "mcnll,nfe", "--out", s(&out), s(&traces)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for r in lines(&out) {
        assert_eq!(r["signals"]["mcnll"]["well_defined"], false);
        assert_eq!(r["signals"]["mcnll"]["value"], Value::Null);
        assert_eq!(r["signals"]["nfe"]["well_defined"], true);
    }
}

#[test]
fn score_missing_input_is_usage_error() {
    let o = dlmuq(&["score", "/no/such/traces.jsonl"]);
    assert_eq!(code(&o), 2);
    let o = dlmuq(&["score", "--signals", "perplexity", "/no/such/traces.jsonl"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn score_continues_past_bad_instances_unless_strict() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &[]);
    let text = fs::read_to_string(&traces).unwrap();
    let mut rows: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: Value = serde_json::from_str(&rows[5]).unwrap();
    rec["steps_per_block"] = serde_json::json!([1]);
    rows[5] = rec.to_string();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, rows.join("\n")).unwrap();

    let out = dir.path().join("r.jsonl");
    let o = dlmuq(&["score", "--signals", "nfe", "--out", s(&out), s(&bad)]);
    assert_eq!(code(&o), 1);
    assert_eq!(lines(&out).len(), 29);
    assert!(stderr(&o).contains("sim-000004"));

    let o = dlmuq(&["score", "--strict", "--jobs", "1", "--signals", "nfe", "--out", s(&out), s(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(lines(&out).len() < 29);
}

#[test]
fn config_file_is_strict_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &[]);
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"signals": ["nfe"], "io": {"trace": []}}"#).unwrap();
    assert_eq!(code(&dlmuq(&["--config", s(&cfg), "score", s(&traces)])), 2);

    let out = dir.path().join("r.jsonl");
    let body = serde_json::json!({
        "signals": ["nfe", {"name": "mine", "info_signal": "traj_entropy", "view": "last", "weighted": true}],
        "provider": {"kind": "exact_match"},
        "io": {"traces": [traces]}
    });
    fs::write(&cfg, body.to_string()).unwrap();
    let o = dlmuq(&["--config", s(&cfg), "score", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let keys: Vec<String> = lines(&out)[0]["signals"].as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["mine", "nfe"]);

    assert_eq!(code(&dlmuq(&["--config", s(&cfg), "score", "--signals", "flip_count", "--out", s(&out)])), 0);
    let keys: Vec<String> = lines(&out)[0]["signals"].as_object().unwrap().keys().cloned().collect();
    assert_eq!(keys, ["flip_count"]);
}

#[test]
fn endpoint_environment_override() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &["--n-traces", "2"]);
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"signals": ["ad_full"], "provider": {"kind": "remote", "endpoint": "http://config.invalid", "retries": 0, "timeout_secs": 2}}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dlmuq"))
        .args(["--config", s(&cfg), "score", "--out", s(&dir.path().join("r.jsonl")), s(&traces)])
        .env("DLMUQ_SIM_ENDPOINT", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("remote similarity failed"), "{err}");
    assert!(!err.contains("config.invalid"), "{err}");
}

fn write_eval_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let mut reports = String::new();
    let mut qualities = String::new();
    for i in 0..40 {
        let q = (i as f64 + 0.5) / 40.0;
        reports.push_str(&format!(
            "{{\"instance_id\":\"x{i:02}\",\"signals\":{{\"good\":{{\"value\":{},\"well_defined\":true}},\"bad\":{{\"value\":{},\"well_defined\":true}}}}}}\n",
            -q,
            q
        ));
        qualities.push_str(&format!("{{\"instance_id\":\"x{i:02}\",\"quality\":{q}}}\n"));
    }
    let (r, q) = (dir.join("reports.jsonl"), dir.join("quality.jsonl"));
    fs::write(&r, reports).unwrap();
    fs::write(&q, qualities).unwrap();
    (r, q)
}

#[test]
fn eval_oracle_fixture() {
    let dir = TempDir::new().unwrap();
    let (r, q) = write_eval_fixture(dir.path());
    let out = dir.path().join("metrics");
    let o = dlmuq(&[
        "eval", "--reports", s(&r), "--qualities", s(&q), "--metric", "all", "--preset", "mt", "--dataset", "toy",
        "--out-dir", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let good: Value = serde_json::from_str(&fs::read_to_string(out.join("good.prr.json")).unwrap()).unwrap();
    assert_eq!(good["value"], 1.0);
    assert_eq!(good["n"], 40);
    assert_eq!(good["preset"], "mt");
    assert_eq!(good["dataset"], "toy");
    assert!(fs::read_to_string(out.join("good.curve.csv")).unwrap().starts_with("reject_fraction,"));
    let bad: Value = serde_json::from_str(&fs::read_to_string(out.join("bad.prr.json")).unwrap()).unwrap();
    assert!(bad["value"].as_f64().unwrap() < 0.0);

    // with the mt threshold of 0.8, 8 of the 40 records are positive
    let auc: Value = serde_json::from_str(&fs::read_to_string(out.join("good.roc_auc.json")).unwrap()).unwrap();
    assert_eq!(auc["value"], 1.0);
    let o = dlmuq(&["eval", "--reports", s(&r), "--qualities", s(&q), "--metric", "roc_auc", "--threshold", "2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("0 positive"), "{}", stderr(&o));
}

#[test]
fn eval_missing_quality_file() {
    let dir = TempDir::new().unwrap();
    let (r, _) = write_eval_fixture(dir.path());
    let o = dlmuq(&["eval", "--reports", s(&r), "--qualities", s(&dir.path().join("nope.jsonl"))]);
    assert_eq!(code(&o), 2);
    let o = dlmuq(&["eval", "--reports", s(&r), "--metric", "roc_auc"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_merges_datasets() {
    let dir = TempDir::new().unwrap();
    let (r, q) = write_eval_fixture(dir.path());
    for ds in ["alpha", "beta"] {
        let out = dir.path().join(ds);
        let o = dlmuq(&["eval", "--reports", s(&r), "--qualities", s(&q), "--dataset", ds, "--out-dir", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let csv = dir.path().join("table.csv");
    let o = dlmuq(&["report", s(&dir.path().join("alpha")), s(&dir.path().join("beta")), "--out", s(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "signal,alpha,beta,mean");
    assert_eq!(rows[2], "good,1,1,1");
    assert!(rows[1].starts_with("bad,-"));

    let o = dlmuq(&["report", s(&dir.path().join("alpha")), s(&dir.path().join("alpha"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn end_to_end_simulated_quality() {
    let dir = TempDir::new().unwrap();
    let traces = simulate(dir.path(), &["--n-traces", "80", "--unmask-policy", "confidence_order"]);
    let reports = dir.path().join("reports.jsonl");
    assert_eq!(code(&dlmuq(&["score", "--out", s(&reports), s(&traces)])), 0);
    // quality: did the output land on the most likely sequence
    let mode_votes = lines(&traces)[1..]
        .iter()
        .map(|t| t["final_tokens"].to_string())
        .fold(std::collections::HashMap::new(), |mut m, k| {
            *m.entry(k).or_insert(0) += 1;
            m
        });
    let mode = mode_votes.iter().max_by_key(|(k, v)| (**v, (*k).clone())).unwrap().0;
    let mode: Value = serde_json::from_str(mode).unwrap();
    let q: String = lines(&traces)[1..]
        .iter()
        .map(|t| {
            let hit = t["final_tokens"] == mode;
            format!("{{\"instance_id\":{},\"quality\":{}}}\n", t["instance_id"], u8::from(hit))
        })
        .collect();
    let qpath = dir.path().join("q.jsonl");
    fs::write(&qpath, q).unwrap();
    let o = dlmuq(&["eval", "--reports", s(&reports), "--qualities", s(&qpath), "--signals", "d_cocoa_l,d_cocoa_g"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().count(), 2);
}
