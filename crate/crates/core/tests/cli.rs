mod common;

use std::path::Path;
use std::process::{Command, Output};

fn nfcs(cache: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nfcs"))
        .arg("--cache-dir")
        .arg(cache)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_tiny_plan(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    let mut plan = common::tiny_plan(0);
    plan.proxy.iterations = 4;
    plan.search.fpn_archs = 5;
    plan.search.head_archs = 5;
    std::fs::write(&path, plan.to_toml().unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn cost_of_original_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = nfcs(dir.path(), &["cost", "--original"]);
    let b = nfcs(dir.path(), &["cost", "--original"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("head 89.267 G / 4.9207 M"), "{}", stdout(&a));
    let csv = nfcs(dir.path(), &["cost", "--original", "--csv"]);
    assert!(stdout(&csv).lines().count() > 10);
}

#[test]
fn cost_accepts_tokens_and_reports_bad_ones() {
    let dir = tempfile::tempdir().unwrap();
    let tokens = [vec!["0"; 35], vec!["6"; 6], vec!["0"]].concat().join(",");
    let ok = nfcs(dir.path(), &["cost", "--tokens", &tokens]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let short = nfcs(dir.path(), &["cost", "--tokens", "0,1,2"]);
    assert_eq!(short.status.code(), Some(3));
    let mut bad: Vec<&str> = vec!["0"; 42];
    bad[2] = "9";
    let bad = nfcs(dir.path(), &["cost", "--tokens", &bad.join(" ")]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("position 2"));
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_tiny_plan(dir.path());
    let head = "0 0 0 0 0 0 0";
    let missing = nfcs(dir.path(), &["eval-arch", "--plan", &plan, "--stage", "head", "--tokens", head]);
    assert_eq!(missing.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nfcs prepare"));

    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "[proxy]\nnope = 1\n").unwrap();
    let o = nfcs(dir.path(), &["prepare", "--plan", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4));

    let o = nfcs(dir.path(), &["report", "--log", dir.path().join("absent.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(10));
}

#[test]
fn prepare_search_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let plan = write_tiny_plan(dir.path());
    let o = nfcs(dir.path(), &["prepare", "--plan", &plan]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let e = nfcs(dir.path(), &["eval-arch", "--plan", &plan, "--stage", "head", "--tokens", "4,4,4,4,4,4,2"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&e)).unwrap();
    assert!(v["reward"].as_f64().unwrap() <= 0.0);
    let e2 = nfcs(dir.path(), &["eval-arch", "--plan", &plan, "--stage", "head", "--tokens", "4,4,4,4,4,4,2"]);
    assert_eq!(e.stdout, e2.stdout);

    let log = dir.path().join("run.jsonl");
    let s = nfcs(dir.path(), &["search", "--plan", &plan, "--log", log.to_str().unwrap(), "--jobs", "2"]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 1 + 2 + 10);

    let out = dir.path().join("rep");
    let r = nfcs(dir.path(), &["report", "--log", log.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(r.status.success());
    assert!(out.join("records.csv").exists());
}
