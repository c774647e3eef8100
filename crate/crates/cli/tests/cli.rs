use std::path::Path;
use std::process::{Command, Output};

fn dami(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dami"))
        .args(args)
        .env_remove("DAMI_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 12] = [
    "--embed-dim", "8", "--hidden", "6", "--attention", "6", "--epochs", "2", "--batch-size", "16", "--seed", "3",
];

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&dami(&["synth", "--n", "30", "--seed", "5", "--out", p(&a)]));
    ok(&dami(&["synth", "--n", "30", "--seed", "5", "--out", p(&b)]));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 5);

    let stats = ok(&dami(&["ingest-check", "--corpus", p(&a)]));
    assert!(stats.contains("30"), "{stats}");
}

#[test]
fn score_reproduces_the_hand_computed_session() {
    let dir = tempfile::tempdir().unwrap();
    let gold = dir.path().join("gold.jsonl");
    let labels: Vec<String> = (0..6)
        .map(|t| {
            let label = u8::from(t == 5);
            let role = if t % 2 == 0 { "customer" } else { "agent" };
            format!(r#"{{"role":"{role}","text":"w{t}","label":{label}}}"#)
        })
        .collect();
    std::fs::write(&gold, format!("{{\"session_id\":\"s\",\"utterances\":[{}]}}\n", labels.join(","))).unwrap();
    let pred = dir.path().join("pred.jsonl");
    std::fs::write(
        &pred,
        "{\"session_id\":\"s\",\"probs\":[0.1,0.1,0.1,0.1,0.9,0.2],\"labels\":[0,0,0,0,1,0]}\n",
    )
    .unwrap();
    let out = ok(&dami(&["score", "--gold", p(&gold), "--pred", p(&pred), "--json"]));
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    for (key, want) in [("GT-I", 0.6065), ("GT-II", 0.8825), ("GT-III", 0.9460)] {
        let got = r[key].as_f64().unwrap();
        assert!((got - want).abs() < 5e-5, "{key}: {got}");
    }

    let sweep = ok(&dami(&["sweep-lambda", "--gold", p(&gold), "--pred", p(&pred), "--grid=-0.5,0,0.5", "--json"]));
    let rows: serde_json::Value = serde_json::from_str(&sweep).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    // an early prediction is penalized less as lambda grows
    assert!(rows[0]["GT-I"].as_f64() < rows[2]["GT-I"].as_f64());
}

#[test]
fn train_predict_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    ok(&dami(&["synth", "--n", "40", "--seed", "2", "--out", p(&corpus)]));
    let run = dir.path().join("run");
    let mut args = vec!["train", "--corpus", p(&corpus), "--out-dir", p(&run)];
    args.extend(SMALL);
    ok(&dami(&args));
    for f in ["model.ckpt", "train_log.jsonl", "test.jsonl", "report.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let preds = dir.path().join("preds.jsonl");
    let test = run.join("test.jsonl");
    ok(&dami(&["predict", "--checkpoint", p(&run.join("model.ckpt")), "--corpus", p(&test), "--out", p(&preds)]));
    assert!(dir.path().join("preds.manifest.json").exists());
    let scored: serde_json::Value =
        serde_json::from_str(&ok(&dami(&["score", "--gold", p(&test), "--pred", p(&preds), "--json"]))).unwrap();
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    for (k, v) in report.as_object().unwrap() {
        match (v.as_f64(), scored[k].as_f64()) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9, "{k}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "{k}"),
        }
    }
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.jsonl");
    ok(&dami(&["synth", "--n", "30", "--seed", "8", "--out", p(&corpus)]));
    let out = dir.path().join("abl");
    let mut args = vec!["ablate", "--corpus", p(&corpus), "--out-dir", p(&out), "--variants", "full,no-matching"];
    args.extend(SMALL);
    let table = ok(&dami(&args));
    assert!(table.contains("full") && table.contains("no_matching"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json.as_object().unwrap().len(), 2);
    assert!(out.join("no_matching_train_log.jsonl").exists());
}

#[test]
fn output_dir_variable_anchors_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_dami"))
        .args(["synth", "--n", "5", "--out", "nested/c.jsonl"])
        .env("DAMI_OUTPUT_DIR", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.path().join("nested/c.jsonl").exists());
    assert!(dir.path().join("nested/c.manifest.json").exists());
}

#[test]
fn exit_codes() {
    let usage = dami(&["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));

    let missing = dami(&["score", "--gold", "/nonexistent/g.jsonl", "--pred", "/nonexistent/p.jsonl"]);
    assert_eq!(missing.status.code(), Some(1));
    let err = String::from_utf8(missing.stderr).unwrap();
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad = tempfile::NamedTempFile::new().unwrap();
    std::fs::write(bad.path(), "{\"session_id\":\"a\",\"utterances\":[{\"role\":\"customer\",\"text\":\"hi\",\"label\":0}]}\nnot json\n").unwrap();
    let out = dami(&["ingest-check", "--corpus", p(bad.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("line"));
}
