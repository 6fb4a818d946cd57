mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::small_config;
use seed_cl::config::{DataSource, IdxConfig};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_seed-cl");

fn cli(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut c = Command::new(BIN);
    c.args(args).env_remove("SEED_CL_THREADS");
    for (k, v) in envs {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new(experts: usize, tasks: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        std::fs::write(&config, small_config(31, experts, tasks, 2).to_toml()).unwrap();
        Self { dir, config }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, name: &str, extra: &[&str], envs: &[(&str, &str)]) -> Output {
        let out = self.out(name);
        let mut args = vec!["run", "--config", s(&self.config), "--out-dir", s(&out)];
        args.extend_from_slice(extra);
        cli(&args, envs)
    }

    fn json(&self, name: &str, file: &str) -> Value {
        serde_json::from_str(&std::fs::read_to_string(self.out(name).join(file)).unwrap()).unwrap()
    }
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_every_artifact() {
    let f = Fixture::new(2, 4);
    assert_ok(&f.run("a", &["--trace"], &[]));
    for file in [
        "accuracy_matrix.csv",
        "accuracy_matrix_task_aware.csv",
        "relative_accuracy.csv",
        "overlap.csv",
        "summary.json",
        "report.json",
        "task_log.jsonl",
        "trace.jsonl",
        "config.toml",
        "state.bin",
        "metadata.json",
    ] {
        assert!(f.out("a").join(file).is_file(), "missing {file}");
    }
    let summary = f.json("a", "summary.json");
    assert_eq!(summary["tasks"], 4);
    assert_eq!(summary["experts"], 2);
    let matrix = std::fs::read_to_string(f.out("a").join("accuracy_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().next().unwrap(), "after_task,task_1,task_2,task_3,task_4");
    assert_eq!(matrix.lines().count(), 5);
    let logs = std::fs::read_to_string(f.out("a").join("task_log.jsonl")).unwrap();
    assert_eq!(logs.lines().count(), 4);
}

#[test]
fn config_errors_exit_one_without_output() {
    let f = Fixture::new(2, 3);
    let cases: Vec<(Vec<&str>, Vec<(&str, &str)>)> = vec![
        (vec!["--tau", "-1"], vec![]),
        (vec!["--alpha", "1.5"], vec![]),
        (vec!["--experts", "0"], vec![]),
        (vec!["--strategy", "best"], vec![]),
        (vec!["--representation", "sparse"], vec![]),
        (vec!["--until-task", "9"], vec![]),
        (vec![], vec![("SEED_CL_THREADS", "zero")]),
    ];
    for (i, (extra, envs)) in cases.iter().enumerate() {
        let name = format!("bad{i}");
        let o = f.run(&name, extra, envs);
        assert_eq!(o.status.code(), Some(1), "case {extra:?} {envs:?}");
        assert!(!f.out(&name).exists(), "case {extra:?} wrote output");
    }

    let broken = f.dir.path().join("broken.toml");
    std::fs::write(&broken, "seed = 1\n[unknown]\nx = 2\n").unwrap();
    let o = cli(&["run", "--config", s(&broken), "--out-dir", s(&f.out("bad_toml"))], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!f.out("bad_toml").exists());

    let o = cli(&["run", "--config", s(&f.dir.path().join("absent.toml"))], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let f = Fixture::new(2, 3);
    let idx = f.dir.path().join("idx.toml");
    let mut cfg = small_config(31, 2, 3, 2);
    cfg.scenario.source = DataSource::Idx;
    cfg.scenario.blobs = None;
    cfg.scenario.idx = Some(IdxConfig {
        train_images: "nope-img".into(),
        train_labels: "nope-lab".into(),
        test_images: "nope-img".into(),
        test_labels: "nope-lab".into(),
        train_per_class: None,
        test_per_class: None,
    });
    std::fs::write(&idx, cfg.to_toml()).unwrap();
    let o = cli(&["run", "--config", s(&idx), "--out-dir", s(&f.out("idx"))], &[]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    assert!(!f.out("idx").exists());

    assert_ok(&f.run("a", &[], &[]));
    let state = f.out("a").join("state.bin");
    let bytes = std::fs::read(&state).unwrap();

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 0x10;
    let bad = f.dir.path().join("corrupt.bin");
    std::fs::write(&bad, &corrupt).unwrap();
    assert_eq!(cli(&["eval", "--state", s(&bad)], &[]).status.code(), Some(2));
    assert_eq!(cli(&["inspect", "--state", s(&bad), "--what", "params"], &[]).status.code(), Some(2));

    let mut versioned = bytes;
    versioned[8] = 99;
    let bad = f.dir.path().join("version.bin");
    std::fs::write(&bad, &versioned).unwrap();
    let o = cli(&["eval", "--state", s(&bad)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn round_robin_cycles_through_experts() {
    let f = Fixture::new(3, 7);
    assert_ok(&f.run("rr", &["--strategy", "round-robin"], &[]));
    let logs = std::fs::read_to_string(f.out("rr").join("task_log.jsonl")).unwrap();
    for line in logs.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let t = v["task"].as_u64().unwrap();
        assert_eq!(v["chosen"], serde_json::json!([1 + (t - 1) % 3]));
    }
}

#[test]
fn eval_reproduces_the_report() {
    let f = Fixture::new(2, 4);
    assert_ok(&f.run("a", &["--tau", "2.0"], &[]));
    let report = f.json("a", "report.json");
    let o = cli(&["eval", "--state", s(&f.out("a").join("state.bin"))], &[]);
    assert_ok(&o);
    let e: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(e["tau"], 2.0);
    assert_eq!(e["task_agnostic"], report["accuracy_matrix"][3]);
    assert_eq!(e["task_aware"], report["accuracy_matrix_task_aware"][3]);
    assert_eq!(e["task_agnostic_pooled"], report["final_accuracy"]);

    let o = cli(&["eval", "--state", s(&f.out("a").join("state.bin")), "--mode", "aware"], &[]);
    let e: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(e.get("task_agnostic").is_none());
    assert!(e.get("task_aware").is_some());
}

#[test]
fn bootstrap_only_run_reports_no_selection() {
    let f = Fixture::new(4, 3);
    assert_ok(&f.run("boot", &[], &[]));
    let o = cli(&["inspect", "--state", s(&f.out("boot").join("state.bin")), "--what", "overlap"], &[]);
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    for (t, row) in rows.iter().enumerate() {
        assert_eq!(row.matches("no selection").count(), 4);
        assert!(row.ends_with(&format!(",{}", t + 1)));
    }
}

#[test]
fn diversity_columns_are_centered() {
    let f = Fixture::new(3, 5);
    assert_ok(&f.run("d", &[], &[]));
    let o = cli(&["inspect", "--state", s(&f.out("d").join("state.bin")), "--what", "diversity"], &[]);
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for j in 0..5 {
        let sum: f64 = rows.iter().map(|r| r[j]).sum();
        assert!(sum.abs() < 1e-5, "column {j} sums to {sum}");
    }
    let from_run = std::fs::read_to_string(f.out("d").join("relative_accuracy.csv")).unwrap();
    assert_eq!(text, from_run);
}

#[test]
fn thread_cap_does_not_change_results() {
    let f = Fixture::new(2, 4);
    assert_ok(&f.run("one", &[], &[("SEED_CL_THREADS", "1")]));
    assert_ok(&f.run("many", &[], &[("SEED_CL_THREADS", "4")]));
    assert_eq!(f.json("one", "metadata.json")["threads"], 1);
    assert_eq!(f.json("many", "metadata.json")["threads"], 4);
    for file in ["accuracy_matrix.csv", "overlap.csv", "report.json"] {
        assert_eq!(
            std::fs::read(f.out("one").join(file)).unwrap(),
            std::fs::read(f.out("many").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn resumed_cli_run_matches_straight_run() {
    let f = Fixture::new(2, 5);
    assert_ok(&f.run("straight", &[], &[]));
    assert_ok(&f.run("part", &["--until-task", "2"], &[]));
    let saved = f.out("part").join("state.bin");
    assert_ok(&f.run("rest", &["--resume", s(&saved)], &[]));
    for file in ["accuracy_matrix.csv", "accuracy_matrix_task_aware.csv", "overlap.csv", "relative_accuracy.csv", "report.json"] {
        assert_eq!(
            std::fs::read(f.out("straight").join(file)).unwrap(),
            std::fs::read(f.out("rest").join(file)).unwrap(),
            "{file}"
        );
    }
    let o = f.run("mismatch", &["--resume", s(&saved), "--experts", "3"], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn overrides_are_echoed() {
    let f = Fixture::new(2, 3);
    assert_ok(&f.run(
        "o",
        &["--seed", "5", "--strategy", "kl-min", "--experts", "3", "--alpha", "0.5", "--representation", "diag"],
        &[],
    ));
    let summary = f.json("o", "summary.json");
    assert_eq!(summary["strategy"], "kl-min");
    assert_eq!(summary["experts"], 3);
    assert_eq!(summary["alpha"], 0.5);
    let echo = std::fs::read_to_string(f.out("o").join("config.toml")).unwrap();
    assert!(echo.contains("seed = 5"));
}
