use std::path::Path;
use std::process::{Command, Output};

fn l3doc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l3doc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, data: &str, extra: &str) -> String {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "seed": 3,
  "factor": {{ "n_hat": 2, "l_hat": 2, "s": 2 }},
  "backbone": {{ "widths": [3, 8, 8], "head_widths": [8] }},
  "training": {{ "epochs": 3, "batch_size": 8, "learning_rate": 0.01 {extra} }},
  "data": {data}
}}"#
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SYNTH: &str = r#"{ "synthetic": { "classes": ["sphere", "cube", "torus"], "num_tasks": 2,
    "classes_per_task": 2, "per_class": 6, "points": 16, "noise": 0.01 } }"#;

#[test]
fn count_params_prints_count_first() {
    let o = l3doc(&["count-params", "--family", "stl", "--tasks", "1"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().next(), Some("147648"));

    let o = l3doc(&[
        "count-params",
        "--family",
        "dfcnn",
        "--widths",
        "2,3",
        "--u",
        "2",
        "--lh",
        "4",
    ]);
    // 2 * (6 + 1*1*4) * 1 + 4*1*1
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "24");
}

#[test]
fn configuration_errors_exit_2() {
    let o = l3doc(&["count-params", "--widths", "3,48", "--lhat", "32"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]"));
    assert_eq!(stderr(&o).lines().count(), 1);

    let o = l3doc(&[
        "run",
        "--config",
        "/nonexistent/config.json",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = l3doc(&["run", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_then_eval_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH, "");
    let out = dir.path().join("run");
    let o = l3doc(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "metrics.jsonl",
        "summary.csv",
        "timing.csv",
        "resolved-config.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    let o = l3doc(&["eval", "--run", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));

    std::fs::write(out.join("summary.csv"), summary.replacen("1,", "1,0.5", 1)).unwrap();
    let o = l3doc(&["eval", "--run", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).starts_with("error[mismatch]"));

    // resolved config reproduces the run
    let again = dir.path().join("again");
    let resolved = out.join("resolved-config.json");
    let o = l3doc(&[
        "run",
        "--config",
        resolved.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        summary,
        std::fs::read_to_string(again.join("summary.csv")).unwrap()
    );
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH, "");
    let out = dir.path().join("run");
    let o = l3doc(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--mode",
        "stl",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(out.join("resolved-config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(v["mode"], "stl");
    assert_eq!(v["seed"], 9);
}

#[test]
fn generated_directory_feeds_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = l3doc(&[
        "gen-synth",
        "--classes",
        "sphere,cone,plane",
        "--per-class",
        "5",
        "--points",
        "24",
        "--seed",
        "1",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(data.join("cone").join("train").is_dir());

    let source = format!(
        r#"{{ "directory": {{ "root": {:?}, "num_tasks": 2, "classes_per_task": 2, "points": 16 }} }}"#,
        data.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), &source, "");
    let out = dir.path().join("run");
    let o = l3doc(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let source = format!(
        r#"{{ "directory": {{ "root": {:?}, "num_tasks": 1, "classes_per_task": 1, "points": 16 }} }}"#,
        empty.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), &source, "");
    let o = l3doc(&[
        "run",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let o = l3doc(&["eval", "--run", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SYNTH, r#", "optimizer": { "kind": "sgd" }"#);
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"learning_rate\": 0.01", "\"learning_rate\": 1e300");
    std::fs::write(&cfg, text).unwrap();
    let o = l3doc(&[
        "run",
        "--config",
        &cfg,
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[numeric]"));
}
