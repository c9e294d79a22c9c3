use std::path::Path;
use std::process::{Command, Output};

fn lengthmark(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lengthmark"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_corpus(dir: &Path, n: usize) -> String {
    let mut lines = String::new();
    for i in 0..n {
        let rec = match i % 3 {
            0 => {
                serde_json::json!({"id": format!("q{i}"), "prompt": format!("Question {i}?"), "target_words": 40 + 10 * i})
            }
            1 => {
                serde_json::json!({"id": format!("q{i}"), "prompt": format!("Question {i}?"), "min_words": 60, "max_words": 90})
            }
            _ => {
                serde_json::json!({"id": format!("q{i}"), "prompt": format!("Question {i}?"), "reference": "one two three four five six seven eight nine ten eleven twelve"})
            }
        };
        lines.push_str(&rec.to_string());
        lines.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, lines).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn generate_exact_target_meets_constraint() {
    let o = lengthmark(&[
        "generate",
        "Describe a lighthouse.",
        "--target",
        "50",
        "--backend",
        "mock:compliant",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("count=50 target=50"), "{stderr}");
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains('['), "markers leaked: {text}");
}

#[test]
fn generate_range_meets_constraint() {
    let o = lengthmark(&[
        "generate",
        "Explain tides.",
        "--range",
        "100:150",
        "--backend",
        "mock:compliant:4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("target=100:150"));
}

#[test]
fn generate_miss_exits_one() {
    let o = lengthmark(&[
        "generate",
        "Explain tides.",
        "--target",
        "80",
        "--backend",
        "mock:undershoot=9",
        "--attempts",
        "2",
    ]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn usage_errors_exit_64() {
    let no_constraint = lengthmark(&["generate", "x", "--backend", "mock:compliant"]);
    assert_eq!(code(&no_constraint), 64);
    let both = lengthmark(&[
        "generate",
        "x",
        "--target",
        "5",
        "--range",
        "1:9",
        "--backend",
        "mock:compliant",
    ]);
    assert_eq!(code(&both), 64);
    let bad_range = lengthmark(&[
        "generate",
        "x",
        "--range",
        "9:1",
        "--backend",
        "mock:compliant",
    ]);
    assert_eq!(code(&bad_range), 64);
    let bad_backend = lengthmark(&[
        "generate",
        "x",
        "--target",
        "5",
        "--backend",
        "mock:nonsense",
    ]);
    assert_eq!(code(&bad_backend), 64);
    let no_backend = lengthmark(&["generate", "x", "--target", "5"]);
    assert_eq!(code(&no_backend), 64);
    assert_eq!(code(&lengthmark(&["--help"])), 0);
}

#[test]
fn generate_writes_transcript_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    let r = dir.path().join("r.json");
    let o = lengthmark(&[
        "generate",
        "Describe rain.",
        "--target",
        "30",
        "--backend",
        "mock:compliant:2",
        "--transcript",
        t.to_str().unwrap(),
        "--report",
        r.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let transcript = std::fs::read_to_string(&t).unwrap();
    assert!(transcript.lines().count() > 1);
    for line in transcript.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["attempt"], 0);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(report["count"], 30);
    assert_eq!(report["config"]["backend"], "mock:compliant:2");
}

#[test]
fn config_file_supplies_backend_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[backend]\nurl = \"mock:undershoot=9\"\n[defaults]\nattempts = 1\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let from_file = lengthmark(&["--config", cfg, "generate", "x", "--target", "60"]);
    assert_eq!(code(&from_file), 1);
    let overridden = lengthmark(&[
        "--config",
        cfg,
        "generate",
        "x",
        "--target",
        "60",
        "--backend",
        "mock:compliant",
    ]);
    assert_eq!(code(&overridden), 0);
    std::fs::write(dir.path().join("bad.toml"), "[backend]\napi_key = \"k\"\n").unwrap();
    let bad = lengthmark(&[
        "--config",
        dir.path().join("bad.toml").to_str().unwrap(),
        "generate",
        "x",
        "--target",
        "5",
    ]);
    assert_eq!(code(&bad), 64);
}

#[test]
fn eval_writes_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 5);
    let out = dir.path().join("out");
    let o = lengthmark(&[
        "eval",
        "--corpus",
        &corpus,
        "--backend",
        "mock:compliant:1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 5);
    assert_eq!(json["aggregates"]["failed"], 0);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(std::fs::read_to_string(out.join("report.md"))
        .unwrap()
        .contains("three_stage"));

    let bad = lengthmark(&[
        "eval",
        "--corpus",
        &corpus,
        "--backend",
        "mock:compliant",
        "--method",
        "bogus",
        "--out",
        "x",
    ]);
    assert_eq!(code(&bad), 64);
}

#[test]
fn eval_relative_cost_against_reference() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 4);
    let one = dir.path().join("one");
    let three = dir.path().join("three");
    let o = lengthmark(&[
        "eval",
        "--corpus",
        &corpus,
        "--backend",
        "mock:compliant",
        "--method",
        "implicit:1",
        "--out",
        one.to_str().unwrap(),
        "--formats",
        "json",
    ]);
    assert_eq!(code(&o), 0);
    let o = lengthmark(&[
        "eval",
        "--corpus",
        &corpus,
        "--backend",
        "mock:compliant",
        "--method",
        "implicit:3",
        "--out",
        three.to_str().unwrap(),
        "--formats",
        "json",
        "--reference-report",
        one.join("report.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(three.join("report.json")).unwrap()).unwrap();
    let rel = json["cost"]["relative_cost"].as_f64().unwrap();
    assert!((rel - 3.0).abs() < 1e-9, "{rel}");
    assert!(!three.join("report.csv").exists());
}

#[test]
fn probe_with_perfect_counter_reports_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), 6);
    let out = dir.path().join("probe");
    let o = lengthmark(&[
        "probe",
        "--corpus",
        &corpus,
        "--backend",
        "mock:counter",
        "--intervals",
        "1,4",
        "--implicit",
        "--plan",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("errors.json")).unwrap()).unwrap();
    assert_eq!(json["config"]["intervals"], serde_json::json!([1, 4]));
    assert_eq!(json["aggregate"]["e"], 0.0);
    assert_eq!(json["aggregate"]["e_i"], 0.0);
    assert_eq!(json["items"].as_array().unwrap().len(), 2);
    let rows = std::fs::read_to_string(out.join("probes.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",false")));
}
