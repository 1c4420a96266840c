mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use common::fixture_path;
use serde_json::Value;

fn decrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decrec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = decrec(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest_value(dir: &Path, key: &str) -> String {
    let m: Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["config"]
        .as_array()
        .unwrap()
        .iter()
        .find(|kv| kv[0] == key)
        .map(|kv| kv[1].as_str().unwrap().to_string())
        .unwrap()
}

fn metric_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn fixture() -> String {
    fixture_path().display().to_string()
}

#[test]
fn empty_config_file_yields_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.cfg");
    fs::write(&cfg, "").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        &fixture(),
        "--rounds",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    for (key, want) in [("neighbors", 50.0), ("nu", 0.1), ("mu", 1.0), ("alpha", 30.0), ("xi", 0.01)] {
        assert_eq!(manifest_value(&out, key).parse::<f64>().unwrap(), want, "{key}");
    }
}

#[test]
fn out_of_range_value_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "nu = 1.5\n").unwrap();
    let out = decrec(&["run", "--config", cfg.to_str().unwrap(), "--dataset", &fixture()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nu"));
}

#[test]
fn flags_override_the_file_and_schedule_evaluations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "attack = none\nrounds = 25\neval_every = 5\n").unwrap();
    let out = dir.path().join("out");
    ok(&[
        "--config",
        cfg.to_str().unwrap(),
        "--dataset",
        &fixture(),
        "--attack",
        "pamn",
        "--set",
        "embed_dim=8",
        "--set",
        "layer_widths=16,8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(manifest_value(&out, "attack"), "pamn");
    let rows = metric_rows(&fs::read_to_string(out.join("metrics.csv")).unwrap());
    let rounds: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(rounds, ["0", "5", "10", "15", "20", "25"]);
    assert!(rows.iter().all(|r| r[3] == "pamn"));
}

#[test]
fn replay_reproduces_metrics_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&[
        "--dataset",
        &fixture(),
        "--attack",
        "psmu",
        "--defense",
        "median",
        "--rounds",
        "4",
        "--set",
        "eval_every=2",
        "--out",
        a.to_str().unwrap(),
    ]);
    ok(&["replay", a.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn sweep_runs_each_value_and_matches_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = fixture();
    let common = ["--dataset", fixture.as_str(), "--attack", "pamn", "--rounds", "2", "--set", "embed_dim=8"];
    let sweep = dir.path().join("sweep");
    let mut args = vec!["sweep", "--key", "xi", "--values", "0.01,0.02,0.05,0.1,0.2", "--out", sweep.to_str().unwrap()];
    args.extend(common);
    ok(&args);
    let rows = metric_rows(&fs::read_to_string(sweep.join("sweep.csv")).unwrap());
    let mut values: Vec<&str> = rows.iter().map(|r| r.last().unwrap().as_str()).collect();
    values.dedup();
    assert_eq!(values, ["0.01", "0.02", "0.05", "0.1", "0.2"]);

    let single = dir.path().join("single");
    let mut args = vec!["sweep", "--key", "xi", "--values", "0.05", "--out", single.to_str().unwrap()];
    args.extend(common);
    ok(&args);
    let run = dir.path().join("run");
    let mut args = vec!["run", "--set", "xi=0.05", "--out", run.to_str().unwrap()];
    args.extend(common);
    ok(&args);
    let swept: Vec<Vec<String>> = metric_rows(&fs::read_to_string(single.join("sweep.csv")).unwrap())
        .into_iter()
        .map(|mut r| {
            r.truncate(r.len() - 2);
            r
        })
        .collect();
    assert_eq!(swept, metric_rows(&fs::read_to_string(run.join("metrics.csv")).unwrap()));

    let mut args = vec!["sweep", "--key", "xi", "--values", "", "--out", single.to_str().unwrap()];
    args.extend(common);
    assert!(!decrec(&args).status.success());
    let mut args = vec!["sweep", "--key", "attack", "--values", "pamn", "--out", single.to_str().unwrap()];
    args.extend(common);
    assert!(!decrec(&args).status.success());
}

#[test]
fn pamn_raises_exposure_on_the_toy_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(&["--dataset", &fixture(), "--attack", "pamn", "--seed", "1", "--out", out.to_str().unwrap()]);
    let rows = metric_rows(&fs::read_to_string(out.join("metrics.csv")).unwrap());
    let er = |r: &Vec<String>| r[2].parse::<f64>().unwrap();
    assert!(er(rows.last().unwrap()) > er(&rows[0]), "{rows:?}");
}

#[test]
fn synth_fixture_regenerates_the_bundled_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.dat");
    ok(&["synth-fixture", path.to_str().unwrap()]);
    assert_eq!(fs::read(path).unwrap(), fs::read(fixture_path()).unwrap());
}
