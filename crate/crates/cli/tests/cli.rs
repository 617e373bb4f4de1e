use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn perspective(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perspective"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn error_record(out: &Output) -> Value {
    assert_eq!(out.status.code(), Some(2), "stdout: {}", String::from_utf8_lossy(&out.stdout));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let last = stderr.lines().last().expect("error record");
    serde_json::from_str(last).expect("json error record")
}

fn manifest_commands(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("manifest.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["command"].as_str().unwrap().to_string())
        .collect()
}

const TINY: &str = r#"
seed = 5
eval_split = "dev"
[model]
d_model = 8
n_layers = 1
n_heads = 2
ffn_dim = 8
annotator_embed_dim = 4
metadata_dim = 4
prefix_len = 2
bridge_hidden = 8
dropout = 0.0
[classifier]
epochs = 1
batch_size = 8
[explainer]
epochs = 1
batch_size = 8
[synthetic]
n_instances = 24
"#;

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn synth_then_stats_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    assert!(perspective(&run, &["synth", "--config", &cfg]).status.success());
    let out = perspective(&run, &["stats", "--config", &cfg]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("Instances"));
    assert_eq!(manifest_commands(&run), ["synth", "stats"]);
    let rec: Value = serde_json::from_str(
        std::fs::read_to_string(run.join("manifest.jsonl")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    assert_eq!(rec["config"]["synthetic"]["n_instances"], 24);
    assert!(rec["artifacts"]["corpus.jsonl"].as_str().unwrap().len() == 64);
}

#[test]
fn seed_flag_wins_over_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(perspective(&a, &["synth", "--config", &cfg, "--seed", "99"]).status.success());
    assert!(perspective(&b, &["synth", "--config", &cfg]).status.success());
    let rec: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.jsonl")).unwrap()).unwrap();
    assert_eq!(rec["seed"], 99);
    assert_eq!(rec["config"]["synthetic"]["seed"], 99);
    assert_ne!(
        std::fs::read(a.join("corpus.jsonl")).unwrap(),
        std::fs::read(b.join("corpus.jsonl")).unwrap()
    );
}

#[test]
fn missing_prerequisites_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let rec = error_record(&perspective(dir.path(), &["tune-thresholds"]));
    assert_eq!(rec["error"], "missing");
    assert!(rec["message"].as_str().unwrap().contains("predictions_dev.jsonl"));
    let rec = error_record(&perspective(dir.path(), &["generate", "--mode", "bridge"]));
    assert_eq!(rec["error"], "missing");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "seed = 1\n[model]\nwidth = 3\n").unwrap();
    let rec = error_record(&perspective(dir.path(), &["synth", "--config", p.to_str().unwrap()]));
    assert_eq!(rec["error"], "config");
    assert!(rec["message"].as_str().unwrap().contains("width"));
}

#[test]
fn import_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let release = dir.path().join("release");
    std::fs::create_dir(&release).unwrap();
    std::fs::write(
        release.join("VariErrNLI_dev.json"),
        r#"{"7": {"text": {"context": "A dog runs.", "statement": "An animal moves."},
                  "annotations": {"Ann1": "entailment", "Ann2": "entailment,neutral"},
                  "explanations": {"Ann1": ["dogs are animals"], "Ann2": ["running is moving", "maybe a toy"]}}}"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = perspective(d, &["import", "--release", release.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(
        std::fs::read(a.join("corpus.jsonl")).unwrap(),
        std::fs::read(b.join("corpus.jsonl")).unwrap()
    );

    std::fs::write(release.join("VariErrNLI_dev.json"), r#"{"7": {"text": "#).unwrap();
    let rec = error_record(&perspective(&a, &["import", "--release", release.to_str().unwrap()]));
    assert_eq!(rec["error"], "parse");
}

#[test]
fn gradcheck_subset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = perspective(dir.path(), &["gradcheck", "--blocks", "focal_loss,bridge_mlp", "--seeds", "1,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert!(summary[0]["max_rel_error"].as_f64().unwrap() < 1e-4);
    let rec = error_record(&perspective(dir.path(), &["gradcheck", "--blocks", "nonsense"]));
    assert_ne!(rec["error"], "missing");
}

#[test]
fn staged_pipeline_and_alignment_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    for args in [
        vec!["synth"],
        vec!["train-classifier"],
        vec!["tune-thresholds"],
        vec!["train-explainer", "--mode", "posthoc"],
        vec!["generate", "--mode", "posthoc"],
        vec!["evaluate"],
        vec!["evaluate", "--mode", "posthoc"],
        vec!["faithfulness", "--mode", "posthoc"],
    ] {
        let mut a = args.clone();
        a.extend(["--config", cfg.as_str()]);
        let out = perspective(&run, &a);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    assert!(run.join("faithfulness_posthoc.tsv").exists());
    assert_eq!(manifest_commands(&run).len(), 8);

    let corpus_before = std::fs::read(run.join("corpus.jsonl")).unwrap();
    let gens = run.join("generations_posthoc.jsonl");
    let text = std::fs::read_to_string(&gens).unwrap();
    let first = text.lines().next().unwrap();
    let mut rec: Value = serde_json::from_str(first).unwrap();
    rec["instance_id"] = Value::from("not-in-corpus");
    std::fs::write(&gens, format!("{rec}\n{text}")).unwrap();
    let err = error_record(&perspective(&run, &["evaluate", "--mode", "posthoc", "--config", &cfg]));
    assert_eq!(err["error"], "alignment");
    assert_eq!(std::fs::read(run.join("corpus.jsonl")).unwrap(), corpus_before);
}
