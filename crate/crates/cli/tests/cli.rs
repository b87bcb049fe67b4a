use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn drad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drad"))
        .args(args)
        .env_remove("DRAD_API_KEY")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    /// A temp dir holding a built index and a config that points at it.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let idx = dir.path().join("idx");
        let corpus = fixtures().join("mini_corpus");
        let o = drad(&["index", "--corpus", corpus.to_str().unwrap(), "--out", idx.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let f = fixtures();
        let config = format!(
            "version = 1\nindex = {:?}\ndataset = {:?}\n[gateway]\nbackend = \"mock\"\nmock_script = {:?}\n",
            idx,
            f.join("qa_sample.jsonl"),
            f.join("mock_script.json")
        );
        std::fs::write(dir.path().join("drad.toml"), config).unwrap();
        Self { dir }
    }

    fn config(&self) -> String {
        self.dir.path().join("drad.toml").to_str().unwrap().to_string()
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_string()
    }
}

#[test]
fn help_and_version_exit_zero() {
    for args in [&["--help"][..], &["--version"], &["generate", "--help"], &["help", "index"]] {
        let o = drad(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        assert!(!stdout(&o).is_empty());
    }
}

#[test]
fn every_subcommand_help_lists_its_flags() {
    let global = ["--config", "--seed", "--json", "--log-level", "--help"];
    let run = ["--index", "--mock-script", "--budget", "--theta1", "--m", "--k"];
    let cases: Vec<(&str, Vec<&str>)> = vec![
        ("index", vec!["--corpus", "--out"]),
        ("generate", [&["--question", "--policy"][..], &run].concat()),
        ("detect", vec!["--trace", "--theta1"]),
        (
            "evaluate",
            [&["--task", "--dataset", "--policy", "--answer-mode", "--concurrency", "--output"][..], &run].concat(),
        ),
        (
            "compare-policies",
            [&["--dataset", "--policies", "--answer-mode", "--concurrency", "--output"][..], &run].concat(),
        ),
    ];
    for (sub, flags) in cases {
        let help = stdout(&drad(&[sub, "--help"]));
        for flag in flags.iter().chain(global.iter()) {
            assert!(help.contains(flag), "`{sub} --help` lacks {flag}:\n{help}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(drad(&[]).status.code(), Some(1));
    let o = drad(&["generate", "--question", "q", "--policy", "magic"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage: drad generate"));
    let o = drad(&["index", "--corpus", "/definitely/not/here", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_without_index_names_the_flag() {
    let script = fixtures().join("mock_script.json");
    let o = drad(&["generate", "--policy", "drad", "--question", "q", "--mock-script", script.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--index"), "{}", stderr(&o));
    let o = drad(&[
        "generate",
        "--policy",
        "nor",
        "--question",
        "Where was Bill Clinton born?",
        "--mock-script",
        script.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn index_creates_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("idx");
    let corpus = fixtures().join("mini_corpus");
    let o = drad(&["index", "--json", "--corpus", corpus.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(out.is_dir());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["documents"], 6);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("stray.txt"), "not an index").unwrap();
    let corpus = fixtures().join("mini_corpus");
    let o = drad(&["index", "--corpus", corpus.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let script = fixtures().join("mock_script.json");
    let o = drad(&["generate", "--policy", "nor", "--question", "unscripted?", "--mock-script", script.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no scripted branch"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "version = 9").unwrap();
    let trace = fixtures().join("wikibio_sample.jsonl");
    let o = drad(&["detect", "--trace", trace.to_str().unwrap(), "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version"));
}

#[test]
fn detect_prints_one_verdict_per_entity() {
    let trace = fixtures().join("wikibio_sample.jsonl");
    let o = drad(&["detect", "--trace", trace.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 10);
    for l in &lines {
        for key in ["entity_surface", "token_start", "token_end", "p_entity", "h_entity", "is_hallucination", "theta1", "theta2"] {
            assert!(l.get(key).is_some(), "missing {key} in {l}");
        }
    }
    let flagged: Vec<&str> = lines
        .iter()
        .filter(|l| l["is_hallucination"] == true)
        .map(|l| l["entity_surface"].as_str().unwrap())
        .collect();
    assert!(flagged.contains(&"Edinburgh"));
    assert!(!flagged.contains(&"London"));
}

#[test]
fn generate_drad_corrects_and_is_reproducible() {
    let env = Env::new();
    let args = ["generate", "--config", &env.config(), "--policy", "drad", "--question", "Where was Bill Clinton born?"];
    let a = drad(&args);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let run: Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(run["final_text"], "Bill Clinton was born in Hope, Arkansas. So the answer is Hope.");
    assert_eq!(run["retrieval_invocations"].as_array().unwrap().len(), 1);
    assert_eq!(a.stdout, drad(&args).stdout);
}

#[test]
fn compare_policies_is_byte_identical_across_runs_and_concurrency() {
    let env = Env::new();
    let config = env.config();
    let serial = drad(&["compare-policies", "--config", &config, "--json"]);
    assert_eq!(serial.status.code(), Some(0), "{}", stderr(&serial));
    let parallel = drad(&["compare-policies", "--config", &config, "--json", "--concurrency", "3"]);
    assert_eq!(serial.stdout, parallel.stdout);
    let reports: Vec<Value> = serde_json::from_str(&stdout(&serial)).unwrap();
    let policies: Vec<&str> = reports.iter().map(|r| r["policy"].as_str().unwrap()).collect();
    assert_eq!(policies, ["nor", "srr", "flr", "tpr", "drad"]);
    assert_eq!(reports[4]["aggregates"]["em"], 1.0);
    assert!(reports[4]["aggregates"]["mean_retrievals"].as_f64() < reports[2]["aggregates"]["mean_retrievals"].as_f64());

    let table = stdout(&drad(&["compare-policies", "--config", &config, "--policies", "nor,drad"]));
    assert_eq!(table.lines().count(), 3);
    assert!(table.starts_with("policy"));
}

#[test]
fn evaluate_writes_the_report_file() {
    let env = Env::new();
    let out = env.path("report.json");
    let o = drad(&["evaluate", "--task", "qa", "--policy", "srr", "--config", &env.config(), "--json", "--output", &out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), std::fs::read_to_string(&out).unwrap());
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["completed"], 3);

    let data = fixtures().join("wikibio_sample.jsonl");
    let o = drad(&["evaluate", "--task", "detection", "--dataset", data.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rows: Vec<Value> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[3]["detector"], "rhd_prob_average");
    assert_eq!(rows[3]["auc"], 1.0);
}

#[test]
fn remote_backend_without_key_fails_at_runtime() {
    let env = Env::new();
    let cfg = env.path("remote.toml");
    std::fs::write(&cfg, "version = 1\n[gateway]\nbackend = \"openai-chat\"\nendpoint = \"http://127.0.0.1:9/v1\"\n").unwrap();
    let o = drad(&["generate", "--config", &cfg, "--policy", "nor", "--question", "q"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
