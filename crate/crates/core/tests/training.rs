use mcl_core::cohort::DeploymentNetwork;
use mcl_core::data::SyntheticBlobs;
use mcl_core::tensor::Tensor;
use mcl_core::train::{
    evaluate_cohort, linear_eval, linear_eval_features, random_feature_control, read_config_file, read_metrics, train,
    Checkpoint, LinearEvalOptions, MetricRecord, Mode, TrainConfig,
};
use mcl_core::Error;

fn config(mode: Mode, pairs: &[(&str, &str)]) -> TrainConfig {
    let pairs: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    TrainConfig::from_pairs(mode, &pairs).unwrap()
}

fn small_supervised(extra: &[(&str, &str)]) -> TrainConfig {
    let mut pairs = vec![
        ("dataset", "blobs"),
        ("blobs.classes", "4"),
        ("blobs.dim", "8"),
        ("blobs.train_per_class", "16"),
        ("blobs.test_per_class", "8"),
        ("arch", "mlp:16"),
        ("embed_dim", "8"),
        ("batch_size", "8"),
        ("epochs", "3"),
        ("lr", "0.05"),
        ("augment.max_shift", "0"),
    ];
    pairs.extend_from_slice(extra);
    config(Mode::Supervised, &pairs)
}

fn without_time(metrics: &[MetricRecord]) -> Vec<MetricRecord> {
    metrics
        .iter()
        .cloned()
        .map(|mut m| {
            m.seconds = 0.0;
            m
        })
        .collect()
}

#[test]
fn two_class_blobs_are_fit_exactly() {
    let cfg = config(
        Mode::Supervised,
        &[
            ("dataset", "blobs"),
            ("blobs.classes", "2"),
            ("blobs.dim", "6"),
            ("blobs.separation", "3"),
            ("blobs.noise", "0.3"),
            ("blobs.train_per_class", "20"),
            ("arch", "mlp:16"),
            ("embed_dim", "8"),
            ("batch_size", "4"),
            ("epochs", "10"),
            ("lr", "0.05"),
            ("augment.max_shift", "0"),
        ],
    );
    let out = train(&cfg, None).unwrap();
    let (train_set, _) = cfg.dataset.load(None).unwrap();
    for acc in evaluate_cohort(&out.cohort, &train_set).unwrap() {
        assert_eq!(acc, 100.0);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let cfg = small_supervised(&[]);
    let a = train(&cfg, None).unwrap();
    let b = train(&cfg, None).unwrap();
    assert_eq!(without_time(&a.metrics), without_time(&b.metrics));
    assert_eq!(a.cohort.store(), b.cohort.store());
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let ck_path = dir.path().join("ck.json");
    let metrics_path = dir.path().join("metrics.jsonl");
    let mut full = small_supervised(&[("epochs", "4"), ("schedule", "step:3:0.1")]);
    let straight = train(&full, None).unwrap();

    full.epochs = 2;
    full.checkpoint_path = Some(ck_path.clone());
    full.metrics_path = Some(metrics_path.clone());
    train(&full, None).unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.next_epoch, 2);
    full.epochs = 4;
    let resumed = train(&full, Some(ck)).unwrap();

    assert_eq!(straight.cohort.store(), resumed.cohort.store());
    assert_eq!(without_time(&straight.metrics), without_time(&resumed.metrics));
    let logged = read_metrics(&metrics_path).unwrap();
    assert_eq!(logged, resumed.metrics);
    assert_eq!(logged.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
}

#[test]
fn selfsup_checkpoint_cannot_resume_supervised() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let mut cfg = config(
        Mode::Selfsup,
        &[("epochs", "1"), ("blobs.train_per_class", "8"), ("queue_size", "16")],
    );
    cfg.checkpoint_path = Some(path.clone());
    train(&cfg, None).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert!(matches!(train(&small_supervised(&[]), Some(ck)), Err(Error::Config(_))));
}

#[test]
fn huge_learning_rate_aborts_with_context() {
    let cfg = small_supervised(&[("lr", "1e200"), ("epochs", "5")]);
    match train(&cfg, None) {
        Err(Error::NonFiniteLoss { epoch, batch, terms, .. }) => {
            assert!(epoch >= 1);
            assert_eq!(batch.len(), 8);
            assert!(terms.contains_key("ce"));
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn bank_mode_starts_cold_then_contrasts() {
    let cfg = small_supervised(&[
        ("contrast", "bank"),
        ("bank_size", "64"),
        ("bank_negatives", "6"),
        ("epochs", "3"),
    ]);
    let out = train(&cfg, None).unwrap();
    assert!(out.metrics[0].skipped_steps > 0);
    for m in &out.metrics[1..] {
        assert_eq!(m.skipped_steps, 0);
        let bound = m.mi_lower_bound.unwrap();
        assert!(bound <= 6f64.ln() + 1e-12);
    }
    assert_eq!(out.checkpoint.banks.len(), 2);
    assert_eq!(out.checkpoint.banks[0].filled(), 64);
}

#[test]
fn batch_mode_records_all_terms_and_bound() {
    let out = train(&small_supervised(&[("epochs", "2")]), None).unwrap();
    for m in &out.metrics {
        assert_eq!(m.accuracy.len(), 2);
        assert_eq!(m.skipped_steps, 0);
        assert_eq!(m.steps, 64 / 8);
        // K = B - 2 negatives
        assert!(m.mi_lower_bound.unwrap() <= 6f64.ln());
        for term in ["vcl", "icl", "soft_vcl", "soft_icl", "ce"] {
            assert!(m.loss.per_term[term].is_finite(), "{term}");
        }
    }
}

#[test]
fn too_few_classes_for_batch_size() {
    let cfg = small_supervised(&[("batch_size", "16")]);
    match train(&cfg, None) {
        Err(Error::InsufficientClasses { needed, available }) => {
            assert_eq!((needed, available), (8, 4));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn selfsup_run_warms_up_then_learns() {
    let cfg = config(
        Mode::Selfsup,
        &[
            ("epochs", "2"),
            ("blobs.classes", "4"),
            ("blobs.train_per_class", "16"),
            ("batch_size", "16"),
            ("queue_size", "40"),
        ],
    );
    let out = train(&cfg, None).unwrap();
    // ceil(40 / 16) warmup steps
    assert_eq!(out.metrics[0].skipped_steps, 3);
    assert_eq!(out.metrics[0].steps, 1);
    assert_eq!(out.metrics[1].skipped_steps, 0);
    let state = out.checkpoint.selfsup.as_ref().unwrap();
    for q in &state.queues {
        assert_eq!(q.len(), 40);
        let (enq, deq) = q.counters();
        assert_eq!(enq, 8 * 16);
        assert_eq!(enq - deq, 40);
    }
    assert!(out.metrics[1].mi_lower_bound.unwrap() <= 40f64.ln());
    assert!(out.metrics[1].accuracy.is_empty());
}

#[test]
fn linear_probe_and_random_control() {
    let (train_set, test_set) = SyntheticBlobs {
        classes: 5,
        dim: 10,
        train_per_class: 40,
        test_per_class: 40,
        separation: 2.0,
        noise: 0.3,
        seed: 3,
    }
    .generate()
    .unwrap();
    let opts = LinearEvalOptions::default();
    let direct = linear_eval_features(
        &train_set.inputs,
        &train_set.labels,
        &test_set.inputs,
        &test_set.labels,
        5,
        &opts,
    )
    .unwrap();
    assert!(direct > 95.0, "{direct}");
    let control = random_feature_control(&train_set, &test_set, 16, &opts).unwrap();
    assert!((control - 20.0).abs() < 12.0, "{control}");

    let one_hot = |labels: &[usize]| {
        Tensor::from_rows(&labels.iter().map(|&y| (0..5).map(|c| f64::from(u8::from(c == y))).collect()).collect::<Vec<Vec<f64>>>())
            .unwrap()
    };
    let acc = linear_eval_features(
        &one_hot(&train_set.labels),
        &train_set.labels,
        &one_hot(&test_set.labels),
        &test_set.labels,
        5,
        &opts,
    )
    .unwrap();
    assert_eq!(acc, 100.0);

    let net = DeploymentNetwork::reference(
        mcl_core::cohort::Architecture::Mlp { hidden: vec![32] },
        vec![10],
        5,
        0,
    )
    .unwrap();
    let acc = linear_eval(&net, &train_set, &test_set, &opts).unwrap();
    assert!(acc > control, "{acc} vs {control}");
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(&path, "# small run\nepochs = 7\ntau = 0.2\narch = small_cnn:4,8,8\n").unwrap();
    let mut pairs = read_config_file(&path).unwrap();
    pairs.push(("tau_soft".into(), "0.5".into()));
    let cfg = TrainConfig::from_pairs(Mode::Supervised, &pairs).unwrap();
    assert_eq!(cfg.epochs, 7);
    assert_eq!(cfg.weights.tau_hard, 0.2);
    assert_eq!(cfg.weights.tau_soft, 0.5);
    assert!(read_config_file(&dir.path().join("nope.conf")).is_err());
    let bad = vec![("not_a_key".to_string(), "1".to_string())];
    assert!(matches!(TrainConfig::from_pairs(Mode::Supervised, &bad), Err(Error::Config(_))));
}
