use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use knnlm::model::Checkpoint;

const MODEL: &[&str] = &[
    "--epochs", "1", "--n-layers", "1", "--n-heads", "2", "--d-model", "16", "--d-ff", "32",
    "--context-len", "8", "--batch-size", "8",
];

fn knnlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knnlm"))
        .args(args)
        .output()
        .expect("spawn knnlm")
}

fn ok(args: &[&str]) -> Output {
    let out = knnlm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Writes a small synthetic corpus into `dir`.
fn corpus(dir: &Path) -> (PathBuf, PathBuf) {
    ok(&[
        "synth-corpus", "--out", p(dir), "--synth-vocab", "60", "--synth-train-tokens", "800",
        "--synth-valid-tokens", "200",
    ]);
    (dir.join("train.txt"), dir.join("valid.txt"))
}

fn train(dir: &Path, train: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--out", p(dir), "--train", p(train)];
    args.extend_from_slice(MODEL);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn help_and_parse_errors() {
    assert_eq!(knnlm(&["--help"]).status.code(), Some(0));
    assert_eq!(knnlm(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(knnlm(&["bogus"]).status.code(), Some(1));
    assert_eq!(knnlm(&["train", "--objective", "ce+l3"]).status.code(), Some(1));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = knnlm(&["train", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--train"));
}

#[test]
fn missing_artifact_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = corpus(dir.path());
    // no vocab yet
    let out = knnlm(&["build-datastore", "--out", p(dir.path()), "--train", p(&tr)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing vocab"));

    train(dir.path(), &tr, &[]);
    let out = knnlm(&["eval", "--out", p(dir.path()), "--valid", p(&va)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing datastore"), "{err}");
}

#[test]
fn bad_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "not_a_key": 3}"#).unwrap();
    let out = knnlm(&["train", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = knnlm(&["train", "--config", p(&dir.path().join("absent.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_and_reach_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, _) = corpus(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"objective": "ce+l2", "omega": 0.5, "lr": 0.002, "seed": 4}"#,
    )
    .unwrap();
    train(dir.path(), &tr, &["--config", p(&cfg), "--omega", "1.0"]);

    let ckpt = Checkpoint::from_bytes(&std::fs::read(dir.path().join("model.ckpt")).unwrap()).unwrap();
    assert_eq!(ckpt.config.reg.omega, 1.0);
    assert_eq!(ckpt.config.optim.lr, 0.002);
    assert_eq!(ckpt.config.seed, 4);
    assert!(ckpt.provenance.contains_key("train"));

    let m = json(&dir.path().join("train_metrics.json"));
    assert_eq!(m["config"]["omega"], 1.0);
    assert_eq!(m["config"]["objective"], "ce+l2");
    assert_eq!(m["seed"], 4);
}

#[test]
fn l2_at_zero_omega_matches_plain_ce() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, va) = corpus(dir.path());
    let (a, b) = (dir.path().join("ce"), dir.path().join("l2"));
    train(&a, &tr, &["--valid", p(&va)]);
    train(&b, &tr, &["--valid", p(&va), "--objective", "ce+l2", "--omega", "0"]);
    let (ma, mb) = (json(&a.join("train_metrics.json")), json(&b.join("train_metrics.json")));
    assert_eq!(ma["epochs"], mb["epochs"]);
    let ca = Checkpoint::from_bytes(&std::fs::read(a.join("model.ckpt")).unwrap()).unwrap();
    let cb = Checkpoint::from_bytes(&std::fs::read(b.join("model.ckpt")).unwrap()).unwrap();
    assert_eq!(ca.model, cb.model);
}

#[test]
fn eval_lambda_zero_and_sweep_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (tr, va) = corpus(d);
    train(d, &tr, &[]);
    ok(&["build-datastore", "--out", p(d), "--train", p(&tr)]);

    let out = ok(&["eval", "--out", p(d), "--valid", p(&va), "--lambda", "0"]);
    let m = json(&d.join("eval_metrics.json"));
    assert_eq!(m["ppl_lm"], m["ppl_knn_lm"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("ppl_knn_lm"));

    ok(&["sweep-lambda", "--out", p(d), "--valid", p(&va), "--grid", "0:1:0.05"]);
    let csv = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 21);
    assert!(rows[0].starts_with("0,"));
    assert!(rows[20].starts_with("1,"));
    let s = json(&d.join("sweep.json"));
    for key in ["best_lambda", "ppl_lm", "ppl_knn_lm", "k", "tau"] {
        assert!(!s[key].is_null(), "{key}");
    }
    assert_eq!(s["ppl_lm"], m["ppl_lm"]);

    let bad = knnlm(&["sweep-lambda", "--out", p(d), "--valid", p(&va), "--grid", "0.1:1:0.1"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn vocab_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (tr, _) = corpus(d);
    train(d, &tr, &[]);
    let other = d.join("other.tsv");
    std::fs::write(&other, "<unk>\t0\nfoo\t3\n").unwrap();
    let out = knnlm(&["build-datastore", "--out", p(d), "--train", p(&tr), "--vocab", p(&other)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(d: &Path) {
    let (tr, va) = corpus(d);
    train(d, &tr, &["--valid", p(&va)]);
    ok(&["build-datastore", "--out", p(d), "--train", p(&tr), "--ivf-cells", "4", "--nprobe", "2"]);
    let index = d.join("index.kniv");
    ok(&["eval", "--out", p(d), "--valid", p(&va), "--index", p(&index)]);
    ok(&["sweep-lambda", "--out", p(d), "--valid", p(&va), "--grid", "0,0.25,0.5"]);

    let b = d.join("moco");
    let vocab = d.join("vocab.tsv");
    train(&b, &tr, &["--vocab", p(&vocab), "--objective", "ce+moco", "--omega", "0.01"]);
    ok(&["build-datastore", "--out", p(&b), "--vocab", p(&vocab), "--train", p(&tr)]);
    ok(&[
        "analyze", "--out", p(d), "--valid", p(&va),
        "--compare-checkpoint", p(&b.join("model.ckpt")),
        "--compare-datastore", p(&b.join("datastore.knds")),
        "--top-f", "10", "--components", "2", "--gmm-restarts", "2", "--n-buckets", "5",
    ]);
}

fn listing(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn end_to_end_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (la, lb) = (listing(a.path()), listing(b.path()));
    let names: Vec<_> = la.iter().map(|(n, _)| n.to_str().unwrap().to_string()).collect();
    for want in [
        "analysis.json", "freq_loss_a.csv", "freq_loss_b.csv", "records_a.csv", "records_b.csv",
        "loglik_hist_a.csv", "loglik_hist_b.csv", "sweep.csv", "sweep.json", "eval_metrics.json",
        "index.kniv", "datastore.knds", "model.ckpt", "vocab.tsv",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    assert_eq!(la.len(), lb.len());
    for ((na, ba), (nb, bb)) in la.iter().zip(&lb) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{} differs between runs", na.display());
    }

    let report = json(&a.path().join("analysis.json"));
    let models = report["report"]["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    for m in models {
        let gap = m["mean_loglik_low"].as_f64().unwrap() - m["mean_loglik_high"].as_f64().unwrap();
        assert!((gap - m["gap"].as_f64().unwrap()).abs() < 1e-9);
    }
    let ev = json(&a.path().join("eval_metrics.json"));
    assert_eq!(ev["search"], "ivf");
    assert!(ev["inputs"]["index"].is_string());
}
