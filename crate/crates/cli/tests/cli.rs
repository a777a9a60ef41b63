use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use psttl::experiment::ExperimentConfig;
use psttl_cli::config::{parse_config, parse_grid};
use tempfile::TempDir;

const SMALL: &str = "train_scenes = 400\ntest_scenes = 80\nbase_epochs = 5\nfinetune_epochs = 300\n";

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn psttl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psttl")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = psttl(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

/// One error line of the form `{"error": kind, "message": ...}`.
fn error_kind(o: &Output) -> String {
    assert!(!o.status.success());
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert!(v["message"].is_string());
    v["error"].as_str().unwrap().to_string()
}

/// data, base and novel stages of the small world, built once.
fn fixture() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let d = tempfile::tempdir().unwrap();
        let p = d.path();
        fs::write(p.join("small.toml"), SMALL).unwrap();
        ok(p, &["gen-data", "--config", "small.toml", "--out", "data"]);
        ok(p, &["train-base", "--config", "small.toml", "--data", "data", "--out", "base"]);
        ok(p, &["finetune", "--config", "small.toml", "--data", "data", "--init", "base/m_base.json", "--out", "novel"]);
        d
    })
    .path()
}

#[test]
fn repo_config_matches_the_built_in_defaults() {
    let text = fs::read_to_string(repo("configs/default.toml")).unwrap();
    assert_eq!(parse_config(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn repo_grids_parse() {
    let base = ExperimentConfig::default();
    for (name, rows) in [("components", 5), ("thresholds", 6), ("prototypes", 3), ("strategies", 3)] {
        let text = fs::read_to_string(repo(&format!("configs/grids/{name}.toml"))).unwrap();
        assert_eq!(parse_grid(&text, &base).unwrap().len(), rows, "{name}");
    }
}

#[test]
fn ttl_writes_all_outputs() {
    let p = fixture();
    ok(p, &["ttl", "--config", "small.toml", "--data", "data", "--init", "novel/m_novel.json", "--out", "t1", "--strategy", "one-batch"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("t1/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "ttl");
    assert_eq!(m["config"]["strategy"], "one_batch");
    for f in m["outputs"].as_array().unwrap() {
        assert!(p.join("t1").join(f.as_str().unwrap()).is_file(), "{f}");
    }
    let lines = fs::read_to_string(p.join("t1/runlog.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 40);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("t1/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["iterations"], 40);
    assert!(fs::read_to_string(p.join("t1/report.csv")).unwrap().starts_with("class,split,ap50"));
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let p = fixture();
    ok(p, &["ttl", "--config", "small.toml", "--data", "data", "--init", "novel/m_novel.json", "--out", "t2"]);
    ok(p, &["ttl", "--config", "t2/manifest.json", "--data", "data", "--init", "novel/m_novel.json", "--out", "t3"]);
    for f in ["report.json", "report.csv", "runlog.jsonl", "predictions.jsonl", "teacher.json", "student.json", "summary.json"] {
        assert_eq!(fs::read(p.join("t2").join(f)).unwrap(), fs::read(p.join("t3").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_of_ttl_predictions_matches_the_ttl_report() {
    let p = fixture();
    ok(p, &["ttl", "--config", "small.toml", "--data", "data", "--init", "novel/m_novel.json", "--out", "t4"]);
    ok(p, &["eval", "--config", "small.toml", "--data", "data", "--predictions", "t4/predictions.jsonl", "--out", "e4"]);
    assert_eq!(fs::read(p.join("t4/report.json")).unwrap(), fs::read(p.join("e4/report.json")).unwrap());
    ok(p, &["eval", "--config", "small.toml", "--data", "data", "--init", "novel/m_novel.json", "--out", "e5"]);
}

#[test]
fn invalid_thresholds_fail_before_any_output() {
    let p = fixture();
    fs::write(p.join("bad.toml"), format!("{SMALL}delta_lower = 0.95\n")).unwrap();
    let o = psttl(p, &["ttl", "--config", "bad.toml", "--data", "data", "--init", "novel/m_novel.json", "--out", "nope"]);
    assert_eq!(error_kind(&o), "config");
    assert_eq!(o.status.code(), Some(2));
    assert!(!p.join("nope").exists());
}

#[test]
fn input_problems_are_one_line_errors() {
    let p = fixture();
    let cases: [(&[&str], &str); 6] = [
        (&["ttl", "--config", "small.toml", "--data", "data", "--init", "missing.json", "--out", "x1"], "io"),
        (&["ttl", "--config", "small.toml", "--data", "data", "--init", "base/m_base.json", "--out", "x2"], "input"),
        (&["ttl", "--config", "small.toml", "--seed", "9", "--data", "data", "--init", "novel/m_novel.json", "--out", "x3"], "config"),
        (&["ttl", "--config", "nothere.toml", "--data", "data", "--init", "novel/m_novel.json", "--out", "x4"], "input"),
        (&["ttl", "--frobnicate", "--out", "x5"], "usage"),
        (&["eval", "--config", "small.toml", "--data", "data", "--out", "x6"], "usage"),
    ];
    for (args, kind) in cases {
        let o = psttl(p, args);
        assert_eq!(error_kind(&o), kind, "{args:?}");
        assert!(!p.join(args[args.len() - 1]).exists(), "{args:?}");
    }
}

#[test]
fn thresholds_grid_gives_six_rows() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.toml"), "train_scenes = 300\ntest_scenes = 30\nbase_epochs = 2\nfinetune_epochs = 20\n").unwrap();
    let grid = repo("configs/grids/thresholds.toml");
    ok(p, &["ablate", "--config", "tiny.toml", "--grid", grid.to_str().unwrap(), "--seeds", "0", "--out", "abl"]);
    let csv = fs::read_to_string(p.join("abl/table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[0], "variant,mean_nap50,std_nap50,mean_improvement,seed_0");
    assert!(rows[1].starts_with("upper_0.95,"));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("abl/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"], serde_json::json!([0]));
}

#[test]
fn bad_grid_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("g.toml"), "[[variant]]\nname = \"x\"\nnum_classes = 3\n").unwrap();
    let o = psttl(d.path(), &["ablate", "--grid", "g.toml", "--out", "abl"]);
    assert_eq!(error_kind(&o), "config");
    assert!(!d.path().join("abl").exists());
}
