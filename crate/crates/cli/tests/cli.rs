use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn slowfast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .args(args)
        .env_remove("SLOWFAST_CONFIG")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn template_render_is_byte_exact() {
    let out = slowfast(&["template", "render", "--duration", "3600", "--clips", "85:90,30:40"]);
    assert!(out.status.success());
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "Full video [0,3600]: <fast_video> Subset zoom-in video clip [30,40]: <slow_video_1> \
         Subset zoom-in video clip [85,90]: <slow_video_2>\n"
    );
}

#[test]
fn template_without_clips() {
    let out = slowfast(&["template", "render", "--duration", "100"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "Full video [0,100]: <fast_video>\n");
}

#[test]
fn scripted_episode_answers_after_two_zooms() {
    let q = fixture("cooking_question.json");
    let f = fixture("zoom_twice_then_answer.txt");
    let v = stdout_json(&slowfast(&["episode", "run", "--backend", "scripted", "--fixtures", &f, "--question-file", &q]));
    let trace = &v["trace"];
    assert_eq!(trace["finished"], true);
    assert_eq!(trace["steps"].as_array().unwrap().len(), 3);
    assert_eq!(trace["loss_mask"], serde_json::json!([true, true, true]));
    assert_eq!(v["rewards"]["answer_reward"], 1.0);
}

#[test]
fn never_answering_episode_is_masked() {
    let q = fixture("cooking_question.json");
    let f = fixture("never_answers.txt");
    let v = stdout_json(&slowfast(&["episode", "run", "--backend", "scripted", "--fixtures", &f, "--question-file", &q]));
    assert_eq!(v["trace"]["finished"], false);
    assert!(v["trace"]["loss_mask"].as_array().unwrap().iter().all(|m| m == false));
    assert!(v["rewards"]["per_step_reward"].as_array().unwrap().iter().all(|r| r == 0.0));
}

#[test]
fn synthetic_episode_runs_without_inputs() {
    let v = stdout_json(&slowfast(&["episode", "run", "--backend", "synthetic", "--seed", "7", "--greedy"]));
    assert_eq!(v["backend"], "synthetic");
    assert!(!v["trace"]["steps"].as_array().unwrap().is_empty());
}

#[test]
fn bad_input_exits_two() {
    let out = slowfast(&["--config", "/nonexistent/slowfast.toml", "template", "render", "--duration", "10"]);
    assert_eq!(out.status.code(), Some(2));
    let out = slowfast(&["template", "render", "--duration", "-4"]);
    assert_eq!(out.status.code(), Some(2));
    let out = slowfast(&["episode", "run", "--backend", "scripted"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_backend_exits_three() {
    let q = fixture("cooking_question.json");
    let out = slowfast(&[
        "episode",
        "run",
        "--backend",
        "remote",
        "--url",
        "http://127.0.0.1:9/generate",
        "--question-file",
        &q,
    ]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_overrides_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[layout]\nmax_steps = 1\n").unwrap();
    let q = fixture("cooking_question.json");
    let f = fixture("zoom_twice_then_answer.txt");
    let v = stdout_json(&slowfast(&[
        "--config",
        path_str(&cfg),
        "episode",
        "run",
        "--backend",
        "scripted",
        "--fixtures",
        &f,
        "--question-file",
        &q,
    ]));
    // the single step is forced to answer, so the zoom text cannot parse
    assert_eq!(v["trace"]["steps"].as_array().unwrap().len(), 1);
    assert_eq!(v["trace"]["finished"], false);
}

fn train(dir: &Path, variant: &str) -> PathBuf {
    let out = dir.join(variant);
    let o = slowfast(&[
        "train",
        "--variant",
        variant,
        "--updates",
        "4",
        "--batch-size",
        "6",
        "--eval-instances",
        "20",
        "--eval-every",
        "2",
        "--seed",
        "3",
        "--out",
        path_str(&out),
    ]);
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn train_writes_metrics_eval_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), "mixed");
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("update,variant,accuracy,hit_rate"));
    assert_eq!(summary.lines().count(), 3);
    let eval: Value = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["variant"], "mixed");
    assert_eq!(eval["steps"].as_array().unwrap().len(), 4);
    assert!(eval["baselines"]["no_zoom"]["accuracy"].is_number());
    let manifest: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mixed.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seeds"], serde_json::json!([3]));
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 4);
    assert!(outputs.iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn train_is_deterministic_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = fs::read(train(a.path(), "outcome").join("params.json")).unwrap();
    let pb = fs::read(train(b.path(), "outcome").join("params.json")).unwrap();
    assert_eq!(pa, pb);
}

#[test]
fn unknown_variant_is_rejected() {
    let out = slowfast(&["train", "--variant", "bogus", "--out", "/tmp/never"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cots_filter_reports_and_cleans() {
    let dir = tempfile::tempdir().unwrap();
    let question = r#"{"text":"Q?","options":[{"letter":"A","text":"a"},{"letter":"B","text":"b"}],"gt_answer":"A","gt_spans":[{"start_s":10,"end_s":20}]}"#;
    let rec = |id: &str, kind: &str, text: &str, span: &str, ans: &str| {
        format!(
            r#"{{"record_id":"{id}","video_id":"v","question":{question},"kind":"{kind}","cot_text":"{text}","pred_span":{span},"pred_answer":{ans},"annotator_id":"x"}}"#
        )
    };
    let lines = [
        rec("ok1", "answer", "The cook stirs at 01:50.", "null", "\"A\""),
        rec("ok2", "zoom", "Look near the start.", r#"{"start_s":10,"end_s":22}"#, "null"),
        rec("wrong", "answer", "Clearly B.", "null", "\"B\""),
        rec("far", "zoom", "Look later.", r#"{"start_s":100,"end_s":120}"#, "null"),
        rec("style", "answer", "The audio gives it away.", "null", "\"A\""),
    ];
    let input = dir.path().join("in.jsonl");
    fs::write(&input, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("out.jsonl");
    let report = stdout_json(&slowfast(&["cots", "filter", "--in", path_str(&input), "--out", path_str(&out)]));
    assert_eq!(report["kept"], 2);
    assert_eq!(report["wrong_answer"], 1);
    assert_eq!(report["low_iou"], 1);
    assert_eq!(report["style_violation"], 1);
    let kept = fs::read_to_string(&out).unwrap();
    let first: Value = serde_json::from_str(kept.lines().next().unwrap()).unwrap();
    assert_eq!(first["cot_text"], "I get the answer. The cook stirs at 110.");
    assert!(dir.path().join("out.jsonl.manifest.json").exists());
}

#[test]
fn cots_filter_rejects_bad_lines() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    fs::write(&input, "{not json}\n").unwrap();
    let out = slowfast(&["cots", "filter", "--in", path_str(&input), "--out", path_str(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}
