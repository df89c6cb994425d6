use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/mock20")
}

fn run(args: &[&str], run_dir: &Path) -> (i32, Value, Output) {
    let out = Command::new(env!("CARGO_BIN_EXE_uacorrect"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(args)
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary: Value = serde_json::from_str(stdout.lines().last().unwrap_or("null")).unwrap();
    (out.status.code().unwrap(), summary, out)
}

fn with_fixture<'a>(args: &[&'a str], config: &'a str) -> Vec<&'a str> {
    let mut v = vec!["--config", config];
    v.extend_from_slice(args);
    v
}

fn calibrate_stages(dir: &Path) {
    let cfg = fixture().join("config.toml");
    let cfg = cfg.to_str().unwrap();
    let q = fixture().join("questions.jsonl");
    for stage in [
        vec!["ingest", "--questions", q.to_str().unwrap()],
        vec!["generate"],
        vec!["score"],
        vec!["fit-bins"],
        vec!["build-sft"],
    ] {
        let (code, summary, out) = run(&with_fixture(&stage, cfg), dir);
        assert_eq!(
            code,
            0,
            "{stage:?}: {summary} {}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert_eq!(summary["status"], "ok");
    }
}

fn lines(p: &Path) -> Vec<Value> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn staged_calibration_yields_hundred_sft_records() {
    let dir = tempfile::tempdir().unwrap();
    calibrate_stages(dir.path());
    assert_eq!(lines(&dir.path().join("traces.jsonl")).len(), 100);
    assert_eq!(lines(&dir.path().join("sft.jsonl")).len(), 100);
    let scores = lines(&dir.path().join("scores.jsonl"));
    assert!(scores.iter().all(|s| s["value"].as_f64().unwrap() >= 0.0));
    assert!(scores.iter().all(|s| s["estimator"] == "log-sum"));
}

#[test]
fn fit_bins_with_k_ten_gives_nine_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    calibrate_stages(dir.path());
    let (code, _, _) = run(&["fit-bins", "--k", "10"], dir.path());
    assert_eq!(code, 0);
    let bins: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("binmap.json")).unwrap())
            .unwrap();
    assert_eq!(bins["boundaries"].as_array().unwrap().len(), 9);
}

#[test]
fn staged_and_one_shot_runs_agree() {
    let staged = tempfile::tempdir().unwrap();
    calibrate_stages(staged.path());
    let whole = tempfile::tempdir().unwrap();
    let cfg = fixture().join("config.toml");
    let q = fixture().join("questions.jsonl");
    let (code, summary, _) = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "run",
            "--mode",
            "calibrate",
            "--questions",
            q.to_str().unwrap(),
        ],
        whole.path(),
    );
    assert_eq!(code, 0, "{summary}");
    assert_eq!(summary["details"]["sft_records"], 100);
    for f in ["traces.jsonl", "scores.jsonl", "binmap.json", "sft.jsonl"] {
        assert_eq!(
            std::fs::read(staged.path().join(f)).unwrap(),
            std::fs::read(whole.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_snapshot_reproduces_run() {
    let first = tempfile::tempdir().unwrap();
    let cfg = fixture().join("config.toml");
    let q = fixture().join("questions.jsonl");
    let q = q.to_str().unwrap();
    run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "run",
            "--mode",
            "calibrate",
            "--questions",
            q,
        ],
        first.path(),
    );
    let snap = first.path().join("run_config.toml");
    let second = tempfile::tempdir().unwrap();
    let (code, _, _) = run(
        &[
            "--config",
            snap.to_str().unwrap(),
            "run",
            "--mode",
            "calibrate",
            "--questions",
            q,
        ],
        second.path(),
    );
    assert_eq!(code, 0);
    for f in [
        "traces.jsonl",
        "binmap.json",
        "sft.jsonl",
        "run_config.toml",
    ] {
        assert_eq!(
            std::fs::read(first.path().join(f)).unwrap(),
            std::fs::read(second.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn test_mode_then_report() {
    let cal = tempfile::tempdir().unwrap();
    let cfg = fixture().join("config.toml");
    let cfg = cfg.to_str().unwrap();
    let q = fixture().join("questions.jsonl");
    let q = q.to_str().unwrap();
    run(
        &[
            "--config",
            cfg,
            "run",
            "--mode",
            "calibrate",
            "--questions",
            q,
        ],
        cal.path(),
    );
    let bins = cal.path().join("binmap.json");

    let test = tempfile::tempdir().unwrap();
    let (code, summary, _) = run(
        &[
            "--config",
            cfg,
            "run",
            "--mode",
            "test",
            "--questions",
            q,
            "--bins",
            bins.to_str().unwrap(),
        ],
        test.path(),
    );
    assert_eq!(code, 0, "{summary}");
    assert_eq!(summary["details"]["report"]["n_questions"], 20);
    assert_eq!(lines(&test.path().join("outcomes.jsonl")).len(), 20);

    let (code, _, _) = run(&["report", "--method", "fixture"], test.path());
    assert_eq!(code, 0);
    let table = std::fs::read_to_string(test.path().join("table.csv")).unwrap();
    assert!(table.starts_with("Method,Accuracy,Answer rate,Accuracy*Answer rate"));
    assert!(table.lines().nth(1).unwrap().starts_with("fixture,"));
    let shift = std::fs::read_to_string(test.path().join("behavior_shift.csv")).unwrap();
    assert!(shift.starts_with("Method,True2False,True2Unknown,False2True,False2Unknown"));
}

#[test]
fn test_mode_requires_bins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture().join("config.toml");
    let q = fixture().join("questions.jsonl");
    let (code, summary, _) = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "run",
            "--mode",
            "test",
            "--questions",
            q.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code, 1);
    assert!(summary["error"].as_str().unwrap().contains("--bins"));
}

#[test]
fn cli_overrides_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    calibrate_stages(dir.path());
    let snap = || std::fs::read_to_string(dir.path().join("run_config.toml")).unwrap();
    assert!(snap().contains("k = 10"));
    assert!(snap().contains("seed = 11"));

    let cfg = fixture().join("config.toml");
    let (code, _, _) = run(
        &["--config", cfg.to_str().unwrap(), "--k", "20", "fit-bins"],
        dir.path(),
    );
    assert_eq!(code, 0);
    assert!(snap().contains("k = 20"));
    assert!(snap().contains("seed = 11"));

    let (code, _, _) = run(&["fit-bins"], dir.path());
    assert_eq!(code, 0);
    assert!(snap().contains("k = 100"));
    assert!(snap().contains("seed = 0"));
}

#[test]
fn invalid_config_reports_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[binning]\nk = 1\n").unwrap();
    let (code, summary, out) = run(&["--config", cfg.to_str().unwrap(), "score"], dir.path());
    assert_eq!(code, 1);
    assert_eq!(summary["status"], "invalid");
    assert!(String::from_utf8_lossy(&out.stderr).contains("binning.k"));

    std::fs::write(&cfg, "[binning]\nkk = 3\n").unwrap();
    let (code, _, _) = run(&["--config", cfg.to_str().unwrap(), "score"], dir.path());
    assert_eq!(code, 1);

    let (code, summary, _) = run(&["--estimator", "median", "score"], dir.path());
    assert_eq!(code, 1);
    assert!(summary["error"].as_str().unwrap().contains("estimator"));
}

#[test]
fn missing_upstream_artifact_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (code, summary, _) = run(&["score"], dir.path());
    assert_eq!(code, 1);
    assert!(summary["error"].as_str().unwrap().contains("traces.jsonl"));
    assert!(!dir.path().join("scores.jsonl").exists());
}

#[test]
fn gapped_answer_sets_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    calibrate_stages(dir.path());
    let traces = dir.path().join("traces.jsonl");
    let text = std::fs::read_to_string(&traces).unwrap();
    let kept: Vec<&str> = text
        .lines()
        .enumerate()
        .filter(|(i, _)| *i != 2)
        .map(|(_, l)| l)
        .collect();
    std::fs::write(&traces, kept.join("\n") + "\n").unwrap();
    let (code, _, _) = run(&["score"], dir.path());
    assert_eq!(code, 1);
}

fn write_small_setup(dir: &Path, scripted: &[&str]) -> (PathBuf, PathBuf) {
    let questions = dir.join("q.jsonl");
    let mut q = String::new();
    let mut script = serde_json::Map::new();
    for id in ["a", "b", "c"] {
        q += &format!(
            "{{\"id\":\"{id}\",\"question\":\"Pick {id}?\",\"correct_answer\":\"gold {id}\",\"distractor1\":\"lead\",\"distractor2\":\"tin\",\"distractor3\":\"zinc\"}}\n"
        );
        if scripted.contains(&id) {
            let rows = serde_json::json!([{"token": "The answer is gold ", "p": 0.9}, {"token": id, "p": 0.8}, {"token": ".", "p": 0.95}]);
            for i in 0..2 {
                script.insert(format!("{id}/{i}"), rows.clone());
            }
        }
    }
    std::fs::write(&questions, q).unwrap();
    let script_path = dir.join("script.json");
    std::fs::write(&script_path, Value::Object(script).to_string()).unwrap();
    let cfg = dir.join("c.toml");
    std::fs::write(
        &cfg,
        "[generation]\nnum_responses = 2\n[binning]\nk = 2\n[backend]\nmock_script = \"script.json\"\n[backend.retry]\nattempts = 1\ninitial_backoff = 1\n",
    )
    .unwrap();
    (questions, cfg)
}

#[test]
fn partial_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let (q, cfg) = write_small_setup(dir.path(), &["a", "b"]);
    let (code, summary, _) = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "run",
            "--mode",
            "calibrate",
            "--questions",
            q.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code, 3, "{summary}");
    assert_eq!(summary["status"], "partial");
    let failures = summary["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0]["question_id"], "c");
    assert_eq!(lines(&dir.path().join("sft.jsonl")).len(), 4);
}

#[test]
fn dead_backend_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (q, cfg) = write_small_setup(dir.path(), &[]);
    let (code, summary, _) = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "run",
            "--mode",
            "calibrate",
            "--questions",
            q.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code, 2, "{summary}");

    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let endpoint = format!("http://127.0.0.1:{port}");
    let (code, _, _) = run(
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--backend",
            "http",
            "--endpoint",
            &endpoint,
            "generate",
            "--questions",
            q.to_str().unwrap(),
        ],
        dir.path(),
    );
    assert_eq!(code, 2);
}
