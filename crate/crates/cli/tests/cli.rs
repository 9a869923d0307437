use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "n_per_class = 40\nsource_epochs = 4\nadapt_epochs = 2\nseeds = 1\n";

fn serl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_serl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("exp.conf");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gen_data_writes_both_domains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("data");
    let res = serl(&["gen-data", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let source = fs::read_to_string(out.join("source.csv")).unwrap();
    let target = fs::read_to_string(out.join("target.csv")).unwrap();
    assert_eq!(source.lines().next().unwrap(), "f0,f1,label,domain,split");
    assert_eq!(source.lines().count(), 201);
    assert_eq!(target.lines().filter(|l| l.ends_with(",labeled")).count(), 15);
}

#[test]
fn run_writes_streams_checkpoints_and_features() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let res = serl(&["run", "--config", &cfg, "--seeds", "4,5", "--out", out.to_str().unwrap(), "--export-features"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for s in [4, 5] {
        assert!(out.join(format!("checkpoints/seed{s}.ckpt")).is_file());
        let features = fs::read_to_string(out.join(format!("features/seed{s}.csv"))).unwrap();
        assert!(features.starts_with("z0,"));
        let stream = fs::read_to_string(out.join(format!("metrics/seed{s}.jsonl"))).unwrap();
        // pretrain run line + 4 epochs, adapt run line + 2 epochs
        assert_eq!(stream.lines().count(), 8);
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seeds"], serde_json::json!([4, 5]));
    assert!(fs::read_to_string(out.join("config.conf")).unwrap().contains("seeds = 4,5"));
    assert_eq!(fs::read_to_string(out.join("timings.jsonl")).unwrap().lines().count(), 4);
}

#[test]
fn repeated_runs_give_identical_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(code(&serl(&["run", "--config", &cfg, "--seeds", "2,3", "--out", out.to_str().unwrap()])), 0);
    }
    for s in [2, 3] {
        let name = format!("metrics/seed{s}.jsonl");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn ablate_reports_each_subset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("abl");
    let res = serl(&["ablate", "--config", &cfg, "--terms", "base;prob+mix+pre", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["base", "prob+mix+pre"]);
    assert!(out.join("metrics/ablation-base.jsonl").is_file());
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.contains("prob+mix+pre"));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let ok = serl(&["gradcheck", "--instances", "20"]);
    assert_eq!(code(&ok), 0);
    assert_eq!(String::from_utf8_lossy(&ok.stdout).matches(" ok").count(), 6);
    let bad = serl(&["gradcheck", "--corrupt"]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("spcr"));
}

#[test]
fn config_problems_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    for text in ["lamda_mix = 1\n", "tau = -1\n", "garbage line\n"] {
        let cfg = write_config(dir.path(), text);
        let res = serl(&["run", "--config", &cfg, "--out", out]);
        assert_eq!(code(&res), 2, "{text:?}: {}", String::from_utf8_lossy(&res.stderr));
    }
    assert_eq!(code(&serl(&["run", "--config", "/nonexistent.conf", "--out", out])), 2);
    assert_eq!(code(&serl(&["run", "--seeds", "one", "--out", out])), 2);
    assert_eq!(code(&serl(&["ablate", "--terms", "prob+nope", "--out", out])), 2);
    assert_eq!(code(&serl(&["frobnicate"])), 2);
}

#[test]
fn runtime_failures_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let res = serl(&["run", "--config", &cfg, "--out", blocker.to_str().unwrap()]);
    assert_eq!(code(&res), 3);

    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}lr_backbone = 1e12\nlr_bottleneck = 1e12\nlr_classifier = 1e12\nmomentum = 0.99\n"),
    );
    let out = dir.path().join("diverged");
    let res = serl(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("diverged"));
    let partial = fs::read_to_string(out.join("metrics/seed1.jsonl")).unwrap();
    assert!(partial.lines().next().unwrap().contains("\"kind\":\"run\""));
}
