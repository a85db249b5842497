use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use svfeye::synth::{generate_synthetic, Scenario};
use svfeye::trace::{self, AttentionRecord, ImageGeometry, ModeHint, Trace};

fn svfeye(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svfeye"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_trace(id: &str, probs: Vec<f64>) -> Trace {
    Trace {
        sample_id: id.into(),
        geometry: ImageGeometry::uniform(112, 112, 4, 4),
        question: "What is on the sign?".into(),
        preliminary_answer: "stop".into(),
        answer_token_probs: probs,
        attention: vec![AttentionRecord {
            target: "sign".into(),
            layer_index: 22,
            heads: None,
            values: (0..16).map(|i| if i == 5 { 4.0 } else { 0.25 }).collect(),
        }],
        mode_hint: ModeHint::SingleTarget,
        confidence_after_fusion: None,
    }
}

#[test]
fn decide_confident_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    trace::write_trace(&small_trace("t", vec![0.98, 0.99, 0.97]), &path).unwrap();
    let out = svfeye(&["decide", "--trace", p(&path), "--tau", "0.96"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        stdout(&out),
        "answer_directly sample_id=t confidence=0.980000 threshold=0.960000\n"
    );

    trace::write_trace(&small_trace("t", vec![0.5, 0.6]), &path).unwrap();
    let out = svfeye(&["decide", "--trace", p(&path)]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("fuse "));
}

#[test]
fn calibrate_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    let lines = [
        (0.3, "need_processing"),
        (0.4, "need_processing"),
        (0.5, "need_processing"),
        (0.8, "no_need_processing"),
        (0.9, "no_need_processing"),
    ]
    .iter()
    .enumerate()
    .map(|(i, (c, l))| format!(r#"{{"sample_id":"r{i}","confidence_org":{c},"label":"{l}"}}"#))
    .collect::<Vec<_>>()
    .join("\n");
    fs::write(&path, lines).unwrap();
    let out = svfeye(&["calibrate", "--records", p(&path), "--lambda", "1.0"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(
        stdout(&out).starts_with("tau=0.800000 utility=1.000000 always_fuse=false"),
        "{}",
        stdout(&out)
    );

    let out = svfeye(&["calibrate", "--records", p(&path), "--lambda", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_missing_directory() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = svfeye(&[
        "pipeline",
        "--traces",
        p(&missing),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_fuse_fraction_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("traces");
    fs::create_dir(&traces).unwrap();
    for i in 0..10 {
        let probs = if i < 3 { vec![0.5] } else { vec![0.99] };
        let id = format!("s{i:02}");
        trace::write_trace(&small_trace(&id, probs), &traces.join(format!("{id}.json"))).unwrap();
    }
    let out_dir = dir.path().join("out");
    let out = svfeye(&[
        "pipeline",
        "--traces",
        p(&traces),
        "--out",
        p(&out_dir),
        "--threads",
        "2",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(
        stdout(&out).contains("fuse_fraction=0.300000"),
        "{}",
        stdout(&out)
    );
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 11);

    fs::write(traces.join("broken.json"), "{ not json").unwrap();
    let out = svfeye(&["pipeline", "--traces", p(&traces), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_samples"], 11);
    assert_eq!(report["n_processed"], 10);
    assert_eq!(report["n_errors"], 1);
    assert_eq!(report["errors"][0]["source"], "broken.json");
}

#[test]
fn localize_reports_crop() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    trace::write_trace(&small_trace("t", vec![0.99]), &path).unwrap();
    let out = svfeye(&["localize", "--trace", p(&path)]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(doc["crops"].as_array().unwrap().len(), 1);
    assert_eq!(doc["crops"][0]["target"], "sign");
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    trace::write_trace(&small_trace("g", vec![0.7]), &good).unwrap();
    let out = svfeye(&["validate", "--trace", p(&good)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout(&out), "ok\n");

    let bad = dir.path().join("bad.json");
    let mut t = small_trace("b", vec![1.5]);
    t.attention[0].values.pop();
    trace::write_trace(&t, &bad).unwrap();
    let out = svfeye(&["validate", "--trace", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout(&out);
    assert!(text.contains("answer_token_probs[0]"), "{text}");
    assert!(text.contains("attention[0].values"), "{text}");
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = svfeye(&[
            "synth",
            "--scenario",
            "uncertain_two_blobs",
            "--n",
            "5",
            "--seed",
            "42",
            "--out",
            p(d),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let mut names: Vec<_> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        assert_eq!(fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
    }
    let first = trace::load_trace(&a.join("uncertain_two_blobs-42-0000.json")).unwrap();
    assert_eq!(
        first,
        generate_synthetic(1, Scenario::UncertainTwoBlobs, 42)[0].0
    );
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(svfeye(&["decide"]).status.code(), Some(2));
    assert_eq!(
        svfeye(&["synth", "--scenario", "bogus", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
}
