use std::path::Path;
use std::process::{Command, Output};

fn mcl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

const SMALL: &[&str] = &[
    "--dataset",
    "blobs",
    "--blobs.classes",
    "4",
    "--blobs.dim",
    "6",
    "--blobs.train_per_class",
    "12",
    "--blobs.test_per_class",
    "6",
    "--arch",
    "mlp:12",
    "--embed-dim",
    "6",
    "--batch-size",
    "8",
    "--epochs",
    "2",
    "--augment.max_shift=0",
];

#[test]
fn train_export_and_embed() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train-sup", "--out", "run"];
    args.extend_from_slice(SMALL);
    let summary = json(&mcl(&args, dir.path()));
    assert_eq!(summary["epochs"], 2);
    assert_eq!(summary["accuracy"].as_array().unwrap().len(), 2);
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let exported = json(&mcl(
        &["export-model", "--checkpoint", "run/checkpoint.json", "--network", "1", "--out", "net.json"],
        dir.path(),
    ));
    assert!(exported["parameters"].as_u64().unwrap() > 0);
    assert!(dir.path().join("net.json").exists());

    let emb = json(&mcl(
        &["export-embeddings", "--checkpoint", "run/checkpoint.json", "--split", "test", "--out", "emb"],
        dir.path(),
    ));
    assert_eq!(emb["rows"], 24);
    assert_eq!(emb["dim"], 6);
    let raw = std::fs::read(dir.path().join("emb/embeddings.f32")).unwrap();
    assert_eq!(raw.len(), 24 * 6 * 4);
    let first: Vec<f32> = raw[..24].chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let norm: f32 = first.iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);
    let labels = std::fs::read_to_string(dir.path().join("emb/labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 25);

    let mut resume = vec!["train-sup", "--out", "run", "--resume", "run/checkpoint.json"];
    resume.extend_from_slice(SMALL);
    resume.extend_from_slice(&["--epochs", "3"]);
    assert_eq!(json(&mcl(&resume, dir.path()))["epochs"], 3);
}

#[test]
fn selfsup_then_linear_eval() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("ss.conf"),
        "blobs.classes = 4\nblobs.train_per_class = 16\nblobs.test_per_class = 8\nbatch_size = 16\nqueue_size = 32\nepochs = 2\n",
    )
    .unwrap();
    let summary = json(&mcl(&["train-selfsup", "--config", "ss.conf", "--out", "ss"], dir.path()));
    assert_eq!(summary["linear_eval"].as_array().unwrap().len(), 2);
    assert!(summary["random_feature_control"].as_f64().is_some());

    json(&mcl(
        &["export-model", "--checkpoint", "ss/checkpoint.json", "--out", "enc.json"],
        dir.path(),
    ));
    let eval = json(&mcl(&["linear-eval", "--model", "enc.json", "--config", "ss.conf"], dir.path()));
    let top1 = eval["top1"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&top1));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = mcl(&["train-sup", "--out", "x", "--no-such-key", "1"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = mcl(&["train-sup", "--out", "x", "--epochs"], dir.path());
    assert!(!out.status.success());

    let out = mcl(&["export-model", "--checkpoint", "missing.json", "--out", "n.json"], dir.path());
    assert!(!out.status.success());

    let out = mcl(&["train-sup", "--out", "x", "--dataset", "cifar10", "--data-dir", "nowhere"], dir.path());
    assert!(!out.status.success());
}
