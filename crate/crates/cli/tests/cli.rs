use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use driftbench::report::Summary;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
episodes = 3
[world]
feature_dim = 4
pool_size = 6
classes_per_env = 3
frames_per_env = 20
environments = 3
[embedding]
dim = 4
[meta_train]
episodes = 4
[pretrain]
episodes = 2
steps = 5
batch_size = 4
"#;

fn tiny(dir: &TempDir) -> PathBuf {
    let path = dir.path().join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

fn driftbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftbench"))
        .args(args)
        .env_remove("DRIFTBENCH_THREADS")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn run(dir: &TempDir, learner: &str, extra: &[&str]) -> PathBuf {
    let config = tiny(dir);
    let out = dir.path().join(learner);
    let flag = if matches!(learner, "base" | "lwf") { "--pretrain" } else { "--meta-train" };
    let mut args = vec!["run", "--config", s(&config), "--learner", learner, flag, "--out", s(&out)];
    args.extend_from_slice(extra);
    let result = driftbench(&args);
    assert!(result.status.success(), "{}", stderr(&result));
    out.join("summary.json")
}

#[test]
fn gen_writes_episodes_and_a_stable_manifest() {
    let dir = TempDir::new().unwrap();
    let config = tiny(&dir);
    let manifest = |name: &str| {
        let out = dir.path().join(name);
        let result = driftbench(&["gen", "--config", s(&config), "--out", s(&out), "--split", "val"]);
        assert!(result.status.success(), "{}", stderr(&result));
        let files: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".dbench"))
            .collect();
        assert_eq!(files.len(), 3);
        fs::read_to_string(out.join("manifest.json")).unwrap()
    };
    let first = manifest("a");
    assert_eq!(first, manifest("b"));
    let parsed: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(parsed["split"], "val");
    assert_eq!(parsed["episodes"].as_array().unwrap().len(), 3);
}

#[test]
fn overlapping_split_ranges_are_rejected() {
    let dir = TempDir::new().unwrap();
    let config = tiny(&dir);
    let result = driftbench(&[
        "gen", "--config", s(&config), "--out", s(dir.path()), "--set", "splits.test=[0, 100]",
    ]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr(&result).contains("overlap"), "{}", stderr(&result));
}

#[test]
fn unknown_config_keys_fail_fast() {
    let dir = TempDir::new().unwrap();
    let config = tiny(&dir);
    let result = driftbench(&["gen", "--config", s(&config), "--out", s(dir.path()), "--set", "world.noize=1"]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr(&result).contains("noize"), "{}", stderr(&result));
}

#[test]
fn summary_matches_the_published_schema() {
    let schema: Value =
        serde_json::from_str(include_str!("../schema/summary.schema.json")).unwrap();
    let validator = jsonschema::JSONSchema::compile(&schema).unwrap();
    let dir = TempDir::new().unwrap();
    for learner in ["oap", "upper-bound", "lwf"] {
        let doc: Value = serde_json::from_str(&fs::read_to_string(run(&dir, learner, &[])).unwrap()).unwrap();
        if let Err(errors) = validator.validate(&doc) {
            let messages: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            panic!("{learner}: {}", messages.join("; "));
        }
        assert_eq!(doc.get("f_avg").is_some(), learner != "upper-bound");
    }
}

#[test]
fn single_environment_leaves_forgetting_undefined() {
    let dir = TempDir::new().unwrap();
    let path = run(&dir, "oap", &["--set", "world.environments=1"]);
    let doc: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(doc["f_avg"], Value::Null);
    assert!(doc["o_avg"].is_object());
}

#[test]
fn run_writes_per_episode_logs() {
    let dir = TempDir::new().unwrap();
    let summary = run(&dir, "cpm-lite", &[]);
    let log = fs::read_to_string(summary.parent().unwrap().join("episodes/episode_0002.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("t,env_index,true_class,predicted_class,counted,correct"));
    assert_eq!(lines.count(), 60);
}

#[test]
fn missing_params_file_explains_how_to_make_one() {
    let dir = TempDir::new().unwrap();
    let config = tiny(&dir);
    let missing = dir.path().join("nope.params");
    let result = driftbench(&[
        "run", "--config", s(&config), "--learner", "oap", "--params", s(&missing), "--out", s(dir.path()),
    ]);
    assert_eq!(result.status.code(), Some(2));
    let err = stderr(&result);
    assert!(err.contains("driftbench meta-train") && err.contains("--meta-train"), "{err}");
}

#[test]
fn saved_params_reproduce_the_training_run() {
    let dir = TempDir::new().unwrap();
    let config = tiny(&dir);
    let params = dir.path().join("oap.params");
    let result = driftbench(&["meta-train", "--config", s(&config), "--learner", "oap", "--out", s(&params)]);
    assert!(result.status.success(), "{}", stderr(&result));
    let from_file = dir.path().join("from-file");
    let result = driftbench(&[
        "run", "--config", s(&config), "--learner", "oap", "--params", s(&params), "--out", s(&from_file),
    ]);
    assert!(result.status.success(), "{}", stderr(&result));
    let trained = Summary::load(&run(&dir, "oap", &[])).unwrap();
    let loaded = Summary::load(&from_file.join("summary.json")).unwrap();
    assert_eq!(trained.embedding_sha256, loaded.embedding_sha256);
    assert_eq!(trained.o_avg, loaded.o_avg);
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    let config = tiny(&dir);
    let out = dir.path().join("env");
    let ok = Command::new(env!("CARGO_BIN_EXE_driftbench"))
        .args(["run", "--config", s(&config), "--learner", "oap", "--meta-train", "--out", s(&out)])
        .env("DRIFTBENCH_THREADS", "3")
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", stderr(&ok));
    let bad = Command::new(env!("CARGO_BIN_EXE_driftbench"))
        .args(["run", "--config", s(&config), "--learner", "oap", "--meta-train", "--out", s(&out)])
        .env("DRIFTBENCH_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2), "{}", stderr(&bad));
}

#[test]
fn plot_writes_charts_for_one_or_many_summaries() {
    let dir = TempDir::new().unwrap();
    let one = run(&dir, "oap", &[]);
    let charts = dir.path().join("one");
    let result = driftbench(&["plot", s(&one), "--out", s(&charts)]);
    assert!(result.status.success(), "{}", stderr(&result));
    for name in ["online_vs_env", "forgetting_vs_env", "online_vs_forgetting"] {
        assert!(charts.join(format!("{name}.svg")).exists(), "{name}");
        assert!(charts.join(format!("{name}.csv")).exists(), "{name}");
    }

    let mut all = vec![one];
    for learner in ["base", "lwf", "cpm-lite", "proto-oml", "upper-bound"] {
        all.push(run(&dir, learner, &[]));
    }
    let charts = dir.path().join("all");
    let mut args = vec!["plot"];
    args.extend(all.iter().map(|p| s(p)));
    args.extend(["--out", s(&charts)]);
    let result = driftbench(&args);
    assert!(result.status.success(), "{}", stderr(&result));
    let scatter = fs::read_to_string(charts.join("online_vs_forgetting.svg")).unwrap();
    assert_eq!(scatter.matches("class=\"point\"").count(), 6);
}

#[test]
fn plot_rejects_mismatched_environment_counts() {
    let dir = TempDir::new().unwrap();
    let three = run(&dir, "oap", &[]);
    let sub = TempDir::new_in(dir.path()).unwrap();
    let two = run(&sub, "oap", &["--set", "world.environments=2"]);
    let result = driftbench(&["plot", s(&three), s(&two), "--out", s(&dir.path().join("p"))]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr(&result).contains("N=2"), "{}", stderr(&result));

    let result = driftbench(&["plot", "--out", s(dir.path())]);
    assert!(!result.status.success());
}

#[test]
fn compare_exit_codes() {
    let dir = TempDir::new().unwrap();
    let a = run(&dir, "oap", &[]);
    let result = driftbench(&["compare", s(&a), s(&a), "--metric", "o_avg", "--direction", ">"]);
    assert_eq!(result.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&result.stdout).starts_with("FAIL"));

    let result = driftbench(&["compare", s(&a), s(&a), "--metric", "o_avgg", "--direction", ">"]);
    assert_eq!(result.status.code(), Some(2));
    assert!(stderr(&result).contains("f_avg_paper_literal"), "{}", stderr(&result));
}
