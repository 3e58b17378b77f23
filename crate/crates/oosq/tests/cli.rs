mod support;

use std::path::Path;
use std::process::{Command, Output};

use oosq::error::{EXIT_BACKEND, EXIT_CONFIG, EXIT_IO, EXIT_MISSING_STAGE, EXIT_VALIDATION};
use support::write_config;

fn oosq(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oosq"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env_remove("OOSQ_TEST_MISSING_KEY")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", stderr(&out));
    out
}

#[test]
fn usage_errors_keep_clap_code() {
    let out = Command::new(env!("CARGO_BIN_EXE_oosq")).arg("frobnicate").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"seven\"").unwrap();
    assert_eq!(code(&oosq(&bad, &["ingest"])), EXIT_CONFIG as i32);

    std::fs::write(&bad, "api_key = \"sk-123\"").unwrap();
    let out = oosq(&bad, &["ingest"]);
    assert_eq!(code(&out), EXIT_CONFIG as i32, "secrets are not a config key");

    let cfg = write_config(dir.path(), "");
    let out = oosq(&cfg, &["--m", "4", "ingest"]);
    assert_eq!(code(&out), EXIT_CONFIG as i32);
    assert!(stderr(&out).contains("odd"));

    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&oosq(&missing, &["ingest"])), EXIT_CONFIG as i32);
}

#[test]
fn io_error_for_missing_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = oosq(&cfg, &["ingest", "--input", dir.path().join("absent.jsonl").to_str().unwrap()]);
    assert_eq!(code(&out), EXIT_IO as i32);
}

#[test]
fn missing_upstream_stage_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = oosq(&cfg, &["generate"]);
    assert_eq!(code(&out), EXIT_MISSING_STAGE as i32);
    assert!(stderr(&out).contains("documents.jsonl"), "{}", stderr(&out));

    ok(oosq(&cfg, &["ingest"]));
    ok(oosq(&cfg, &["generate"]));
    let out = oosq(&cfg, &["--variant", "two-shot", "judge-defusion"]);
    assert_eq!(code(&out), EXIT_MISSING_STAGE as i32);
    assert!(stderr(&out).contains("responses-two-shot.jsonl"), "{}", stderr(&out));
    assert!(stderr(&out).contains("respond"));
}

#[test]
fn validation_error_for_corrupt_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(oosq(&cfg, &["ingest"]));
    std::fs::write(dir.path().join("out/questions.jsonl"), "{\"question_id\": 5}\n").unwrap();
    let out = oosq(&cfg, &["respond"]);
    assert_eq!(code(&out), EXIT_VALIDATION as i32, "{}", stderr(&out));
    assert!(stderr(&out).contains("questions.jsonl:1"));
}

#[test]
fn backend_failure_leaves_stage_unrecorded() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let cfg = write_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap();
    let text = text.replace(
        &format!("fixtures = {:?}", support::fixtures_dir().join("mock_responses.jsonl").display().to_string()),
        &format!("fixtures = {:?}", empty.display().to_string()),
    );
    std::fs::write(&cfg, text).unwrap();
    ok(oosq(&cfg, &["ingest"]));
    let out = oosq(&cfg, &["generate"]);
    assert_eq!(code(&out), EXIT_BACKEND as i32, "{}", stderr(&out));
    assert!(stderr(&out).contains("no mock fixture"));
    assert!(!dir.path().join("out/claims.jsonl").exists());
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.jsonl")).unwrap();
    assert!(manifest.contains("\"ingest\""));
    assert!(!manifest.contains("\"generate\""));
}

#[test]
fn live_backend_without_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(oosq(&cfg, &["ingest"]));
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "kind = \"mock\"",
        "kind = \"live\"\nbase_url = \"http://127.0.0.1:9\"\napi_key_env = \"OOSQ_TEST_MISSING_KEY\"",
    );
    std::fs::write(&cfg, text).unwrap();
    let out = oosq(&cfg, &["generate"]);
    assert_eq!(code(&out), EXIT_CONFIG as i32, "{}", stderr(&out));
    assert!(stderr(&out).contains("OOSQ_TEST_MISSING_KEY"));
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|it| it.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn dry_run_writes_nothing_and_needs_no_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = ok(oosq(&cfg, &["--dry-run", "ingest"]));
    assert!(stdout(&out).contains("would admit 3 and reject 1"));
    assert!(!dir.path().join("out").exists());

    ok(oosq(&cfg, &["ingest"]));
    // point the mock at a missing file: any gateway construction would fail
    let text = std::fs::read_to_string(&cfg).unwrap().replace("mock_responses.jsonl", "absent.jsonl");
    std::fs::write(&cfg, text).unwrap();
    let before = listing(&dir.path().join("out"));
    let manifest = std::fs::read(dir.path().join("out/manifest.jsonl")).unwrap();
    let out = ok(oosq(&cfg, &["--dry-run", "generate"]));
    assert!(stdout(&out).contains("would forge 3 documents"));
    assert_eq!(listing(&dir.path().join("out")), before);
    assert_eq!(std::fs::read(dir.path().join("out/manifest.jsonl")).unwrap(), manifest);
    assert!(!dir.path().join("cache").exists());
}

#[test]
fn unchanged_stage_is_skipped_until_inputs_change() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let first = ok(oosq(&cfg, &["ingest"]));
    assert!(stdout(&first).contains("admitted 3"));
    let again = ok(oosq(&cfg, &["ingest"]));
    assert!(stdout(&again).is_empty(), "second run should skip");
    let forced = ok(oosq(&cfg, &["--force", "ingest"]));
    assert!(stdout(&forced).contains("admitted 3"));
    // a tampered output invalidates the record
    std::fs::write(dir.path().join("out/documents.jsonl"), "").unwrap();
    let rerun = ok(oosq(&cfg, &["ingest"]));
    assert!(stdout(&rerun).contains("admitted 3"));
    // parallelism does not change outputs, so it does not force a rerun
    let out = ok(oosq(&cfg, &["--parallelism", "1", "ingest"]));
    assert!(stdout(&out).is_empty());
}

#[test]
fn agree_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dir.path().join("labels.jsonl");
    let mut lines = String::new();
    // two annotators agreeing on 3 of 4 items; system matches annotator a
    let a = ["Yes", "Yes", "No", "No"];
    let b = ["Yes", "No", "No", "No"];
    for i in 0..4 {
        for (who, v) in [("a", a[i]), ("b", b[i]), ("system", a[i]), ("ground_truth", a[i])] {
            lines.push_str(&format!(
                "{{\"question_id\":\"q{i}\",\"annotator\":\"{who}\",\"group\":\"g1\",\"confusion_label\":\"{v}\"}}\n"
            ));
        }
    }
    std::fs::write(&labels, lines).unwrap();
    let cfg = write_config(dir.path(), "labels = \"labels.jsonl\"");
    let out = ok(oosq(&cfg, &["agree"]));
    let tsv = std::fs::read_to_string(dir.path().join("out/agreement.tsv")).unwrap();
    assert_eq!(stdout(&out), tsv);
    // p_o = 0.75, p_e = 0.5 * 0.25 + 0.5 * 0.75 = 0.5, kappa = 0.5
    assert!(tsv.contains("g1\tkappa\t0.50\t-"), "{tsv}");
    assert!(tsv.contains("g1\tacc a\t100.00\t-"), "{tsv}");
    assert!(tsv.contains("g1\tacc b\t75.00\t-"), "{tsv}");
    assert!(tsv.contains("all\tground_truth_acc\t100.00\t-"), "{tsv}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/agreement.json")).unwrap()).unwrap();
    assert_eq!(json["groups"][0]["kappa"]["out_of_scope"], 0.5);
}

#[test]
fn eval_retrieval_over_fixture_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(oosq(&cfg, &["ingest"]));
    ok(oosq(&cfg, &["generate"]));
    let out = ok(oosq(&cfg, &["eval-retrieval"]));
    let s = stdout(&out);
    assert!(s.starts_with("retriever\tqueries\tR@1"), "{s}");
    assert!(s.contains("bm25\t"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/retrieval.json")).unwrap()).unwrap();
    let r1 = json["reports"][0]["recall_at_1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r1));
    // with three documents every query is found within the top 5
    assert_eq!(json["reports"][0]["recall_at_5"], 1.0);
}

/// Vector file lines as the external extractor writes them.
fn vector_lines(n: usize, offset: usize, dim: usize) -> String {
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let values: Vec<f64> = (0..dim).map(|d| sign * (1.0 + ((i * 7 + d * 3) % 5) as f64 * 0.1)).collect();
            serde_json::json!({"id": format!("v{}", i + offset), "dim": dim, "values": values, "label": label}).to_string() + "\n"
        })
        .collect()
}

#[test]
fn probe_trains_and_evaluates_from_vector_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("vectors.jsonl"), vector_lines(200, 0, 4)).unwrap();
    std::fs::write(dir.path().join("eval_vectors.jsonl"), vector_lines(40, 1000, 4)).unwrap();
    let cfg = write_config(dir.path(), "vectors = \"vectors.jsonl\"\neval_vectors = \"eval_vectors.jsonl\"\n\n[probe]\nlr = 1e-3");
    let out = ok(oosq(&cfg, &["train-probe"]));
    assert!(stdout(&out).starts_with("train-probe: best epoch"));
    let rep: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/probe_report.json")).unwrap()).unwrap();
    assert_eq!(rep["records"], 200);
    assert_eq!(rep["dim"], 4);
    assert_eq!(rep["train"].as_u64().unwrap() + rep["val"].as_u64().unwrap() + rep["test"].as_u64().unwrap(), 200);
    ok(oosq(&cfg, &["eval-probe"]));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/probe_eval.json")).unwrap()).unwrap();
    assert_eq!(eval["records"], 40);
    assert_eq!(eval["accuracy"], 1.0);

    // mixed dimensions are rejected before training
    let mut mixed = vector_lines(10, 0, 4);
    mixed.push_str(&vector_lines(1, 50, 3));
    std::fs::write(dir.path().join("vectors.jsonl"), mixed).unwrap();
    let out = oosq(&cfg, &["train-probe"]);
    assert_eq!(code(&out), EXIT_VALIDATION as i32, "{}", stderr(&out));
}
