use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ehrseq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehrseq"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a subcommand that must succeed and returns its one summary line.
fn ok(args: &[&str]) -> Value {
    let out = ehrseq(args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 1, "expected one summary line, got {stdout}");
    serde_json::from_str(lines[0]).expect("summary is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--patients", "120", "--applications", "300", "--out", p(d)]);
    }
    for f in ["corpus.jsonl", "applications.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let c = dir.path().join("c");
    ok(&["gen-data", "--seed", "8", "--patients", "120", "--applications", "300", "--out", p(&c)]);
    assert_ne!(std::fs::read(a.join("corpus.jsonl")).unwrap(), std::fs::read(c.join("corpus.jsonl")).unwrap());
}

#[test]
fn oracle_accuracy_is_one() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--seed", "1", "--patients", "100", "--applications", "10", "--out", p(dir.path())]);
    let corpus = dir.path().join("corpus.jsonl");
    let s = ok(&["eval-next-code", "--predictor", "oracle", "--corpus", p(&corpus)]);
    let acc = s["accuracy"].as_object().unwrap();
    assert!(!acc.is_empty());
    assert!(acc.values().all(|c| c["mean"] == 1.0));
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = ehrseq(&["gen-data", "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = ehrseq(&["build-vocab", "--corpus", "/nonexistent/corpus.jsonl", "--out", "/tmp/x"]);
    assert!(!out.status.success());
    let out = ehrseq(&["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_file_overrides_defaults_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "seed = 3\ngen.n_patients = 50\ngen.n_codes = 30\ninsurance.n_apps = 40\n").unwrap();
    let s = ok(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(s["patients"], 50);
    assert_eq!(s["seed"], 3);
    let s = ok(&["gen-data", "--config", p(&cfg), "--patients", "60", "--out", p(&dir.path().join("e"))]);
    assert_eq!(s["patients"], 60);
    std::fs::write(&cfg, "gen.not_a_field = 1\n").unwrap();
    assert!(!ehrseq(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("f"))]).status.success());
}

/// gen-data -> filter -> build-vocab -> train -> evaluations -> embed ->
/// score-train -> score-eval -> psi, on a tiny configuration.
#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.conf");
    std::fs::write(
        &cfg,
        "model.d = 16\nmodel.n_layers = 1\nmodel.n_heads = 2\nmodel.ffn_dim = 32\nmodel.max_len = 32\nmodel.epochs = 2\n\
         eval.folds = 3\neval.ks = 5,10\n",
    )
    .unwrap();
    let c = p(&cfg);
    ok(&["gen-data", "--seed", "5", "--patients", "300", "--codes", "40", "--applications", "1500", "--out", p(d)]);
    let corpus = d.join("corpus.jsonl");
    let filtered = d.join("filtered.jsonl");
    let s = ok(&["filter", "--corpus", p(&corpus), "--min-code-count", "2", "--out", p(&filtered)]);
    assert!(s["stats"]["kept_patients"].as_u64().unwrap() > 200);
    let vocab = d.join("vocab.txt");
    ok(&["build-vocab", "--corpus", p(&filtered), "--out", p(&vocab)]);
    let model = d.join("model.ckpt");
    let s = ok(&["train", "--config", c, "--seed", "2", "--corpus", p(&filtered), "--vocab", p(&vocab), "--out", p(&model)]);
    assert_eq!(s["losses"].as_array().unwrap().len(), 2);

    let s = ok(&["eval-next-code", "--corpus", p(&filtered), "--vocab", p(&vocab), "--model", p(&model), "--out", p(&d.join("nc.jsonl"))]);
    assert!(s["accuracy"]["th=4"]["mean"].as_f64().is_some());
    assert!(std::fs::read_to_string(d.join("nc.jsonl")).unwrap().lines().count() >= 3);
    let s = ok(&["eval-visits", "--config", c, "--corpus", p(&filtered), "--vocab", p(&vocab), "--model", p(&model)]);
    assert!(s["precision"]["k=5"]["std"].as_f64().is_some());
    let s = ok(&["eval-visits", "--config", c, "--scorer", "pooled", "--pooling", "cls", "--corpus", p(&filtered), "--vocab", p(&vocab), "--model", p(&model)]);
    assert_eq!(s["scorer"], "pooled_cls");

    let embs = d.join("emb.bin");
    let avgs = d.join("avg.bin");
    let s = ok(&["embed", "--corpus", p(&filtered), "--vocab", p(&vocab), "--model", p(&model), "--out", p(&embs), "--averages", p(&avgs)]);
    assert_eq!(s["dim"], 16);
    let n_patients = s["patients"].clone();
    let tsv = d.join("emb.tsv");
    let s = ok(&["export-vectors", "--embeddings", p(&embs), "--out", p(&tsv)]);
    assert_eq!(s["rows"], n_patients);
    let s = ok(&["export-vectors", "--vocab", p(&vocab), "--model", p(&model), "--filter", "icd", "--out", p(&tsv)]);
    assert!(s["rows"].as_u64().unwrap() > 0);
    let first_code = std::fs::read_to_string(&tsv).unwrap().lines().nth(1).unwrap().split('\t').next().unwrap().to_string();
    let s = ok(&["neighbors", "--vocab", p(&vocab), "--model", p(&model), "--token", &first_code, "--top-n", "3"]);
    assert_eq!(s["neighbors"].as_array().unwrap().len(), 3);
    let s = ok(&["risk-curve", "--vocab", p(&vocab), "--model", p(&model), "--group", "I", "--out", p(&d.join("risk.tsv"))]);
    assert_eq!(s["curves"]["ages"].as_array().unwrap().len(), 100);

    let apps = d.join("applications.jsonl");
    let enc = ["--model", p(&model), "--vocab", p(&vocab), "--averages", p(&avgs)];
    for scheme in ["base", "replacement"] {
        let scorer = d.join(format!("{scheme}.scorer"));
        let mut args = vec!["score-train", "--applications", p(&apps), "--scheme", scheme, "--out", p(&scorer)];
        args.extend(enc);
        let s = ok(&args);
        assert!(s["validation_auc"].as_f64().unwrap() > 0.5);
        let mut args = vec!["score-eval", "--applications", p(&apps), "--scorer", p(&scorer), "--from-month", "6"];
        args.extend(enc);
        let e = ok(&args);
        assert_eq!(e["average_auc"], s["validation_auc"]);
        let mut args = vec!["psi", "--scorer", p(&scorer), "--applications", p(&apps)];
        args.extend(enc);
        assert!(ok(&args)["psi"].as_f64().unwrap() >= 0.0);
    }
}
