use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn poguise(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poguise")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn flops_reference_with_selection() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("layers.csv");
    let out = poguise(&[
        "flops",
        "--scale",
        "base",
        "--pose-tokens",
        "--rho",
        "0.6",
        "--lambda",
        "0.3",
        "--csv",
        path_str(&csv),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    let total = v["report"]["total_gflops"].as_f64().unwrap();
    assert!((total - 269.0).abs() / 269.0 < 0.03, "{total}");
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.starts_with("layer,tokens,visual,"));
}

#[test]
fn flops_solves_keep_rate() {
    let out = poguise(&["flops", "--target-gflops", "226"]);
    assert_eq!(out.status.code(), Some(0));
    let rho = stdout_json(&out)["solved_rho"].as_f64().unwrap();
    assert!((0.70..=0.80).contains(&rho), "{rho}");
}

#[test]
fn unknown_flag_is_a_user_error_with_usage() {
    let out = poguise(&["flops", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn help_exits_zero() {
    assert_eq!(poguise(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_is_a_user_error() {
    let out = poguise(&["flops", "--rho", "0.5", "--lambda", "0.7", "--merge", "bipartite"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at most half"));
}

#[test]
fn missing_dataset_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = poguise(&["train", "--data", path_str(&dir.path().join("nope")), "--out", path_str(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let out = poguise(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("composed model"));
}

#[test]
fn demo_select_without_inputs() {
    let out = poguise(&["demo-select", "--class", "2"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("stage,t,row,col,status"));
    // toy grid: 16 visual tokens at the first stage
    assert_eq!(lines.clone().filter(|l| l.starts_with("2,")).count(), 16);
    assert!(lines.all(|l| l.split(',').count() == 5));
}

#[test]
fn pipeline_gen_train_eval_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = poguise(&["gen-data", "--out", path_str(&data), "--clips-per-class", "5", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(data.join("manifest.json").exists());

    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 1, "optim": {"epochs": 2, "batch_size": 4}, "views": 1}"#).unwrap();
    let out = poguise(&[
        "train",
        "--config",
        path_str(&cfg),
        "--data",
        path_str(&data),
        "--out",
        path_str(&run),
        "--rho",
        "0.6",
        "--lambda",
        "0.3",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(run.join("run_config.json")).unwrap()).unwrap();
    assert_eq!(saved["optim"]["epochs"], 2);
    assert_eq!(saved["selection"]["rho"], 0.6);

    let ckpt = run.join("checkpoint");
    let sel = dir.path().join("sel.csv");
    let out = poguise(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--dump-selection",
        path_str(&sel),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let report = stdout_json(&out);
    assert_eq!(report["clips"], 4);
    let rows: u64 = report["confusion"]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|x| x.as_u64().unwrap())
        .sum();
    assert_eq!(rows, 4);
    let dump = std::fs::read_to_string(&sel).unwrap();
    assert!(dump.starts_with("clip,stage,t,row,col,status\n"));
    // two stages per clip: 16 tokens, then the survivors of the first
    let first = dump.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("2")).count();
    assert_eq!(first, 4 * 16);

    let bench = dir.path().join("bench.csv");
    let out = poguise(&[
        "bench",
        "--checkpoint",
        path_str(&ckpt),
        "--data",
        path_str(&data),
        "--rhos",
        "1.0,0.25,0.5",
        "--lambdas",
        "0.3",
        "--merge",
        "none",
        "--views",
        "1",
        "--out",
        path_str(&bench),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&bench).unwrap();
    let gflops: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert_eq!(gflops.len(), 3);
    assert!(gflops.windows(2).all(|w| w[0] < w[1]), "{gflops:?}");
}

#[test]
fn sequential_and_parallel_training_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(poguise(&["gen-data", "--out", path_str(&data), "--clips-per-class", "3"]).status.code(), Some(0));
    let mut logs = Vec::new();
    for (name, extra) in [("a", None), ("b", Some("--sequential"))] {
        let run = dir.path().join(name);
        let mut args = vec!["train", "--data", path_str(&data), "--out", path_str(&run), "--epochs", "1"];
        args.extend(extra);
        assert_eq!(poguise(&args).status.code(), Some(0));
        logs.push(std::fs::read(run.join("train_log.jsonl")).unwrap());
        logs.push(std::fs::read(run.join("checkpoint").join("head.cls.fc2.w.ptnsr")).unwrap());
    }
    assert_eq!(logs[0], logs[2]);
    assert_eq!(logs[1], logs[3]);
}
