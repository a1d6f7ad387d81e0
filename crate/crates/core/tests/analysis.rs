use proptest::prelude::*;
use stnet_core::analysis::{
    count_params_flops, count_params_flops_with, evaluate_with, true_count, Checkpoint, CheckpointError, ConfigError,
    Metrics, TrainConfig, Trainer, CHECKPOINT_VERSION,
};
use stnet_core::data::{generate_dataset, CrowdSample, SceneSpec};
use stnet_core::scale_tree::{BlockKind, GateMode, LeafAssignment};
use stnet_core::tensor::{Shape, Tensor};

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        lambda: 0.25,
        d_channels: 9,
        enhancer_count: 2,
        crop: 16,
        seed: 21,
        ..TrainConfig::default()
    }
}

fn pools() -> (Vec<CrowdSample>, Vec<CrowdSample>, Vec<CrowdSample>) {
    let base = SceneSpec {
        width: 24,
        height: 24,
        count_range: (1, 5),
        head_radius_range: (1.0, 2.0),
        seed: 8,
        ..SceneSpec::default()
    };
    let train = generate_dataset(&base, 9).unwrap();
    let val = generate_dataset(&SceneSpec { seed: 9, ..base.clone() }, 3).unwrap();
    let bg = generate_dataset(&SceneSpec { count_range: (0, 0), ..base }, 3).unwrap();
    (train, val, bg)
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let (train, val, bg) = pools();
    let mut straight = Trainer::new(&tiny_config()).unwrap();
    straight.run(&train, &val, &bg, |_| {}).unwrap();

    let mut first = Trainer::new(&tiny_config()).unwrap();
    first.run_epoch(&train, &val, &bg).unwrap();
    let bytes = first.checkpoint().to_bytes();
    drop(first);
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(resumed.epoch, 1);
    resumed.run(&train, &val, &bg, |_| {}).unwrap();

    assert_eq!(resumed.log.len(), 3);
    for (a, b) in straight.log.iter().zip(&resumed.log) {
        assert!((a.losses.total - b.losses.total).abs() <= 1e-12);
        assert_eq!(a.val_mae, b.val_mae);
    }
    assert!(straight.model.params().values_bit_eq(resumed.model.params()));
}

#[test]
fn checkpoint_round_trip_preserves_eval_outputs() {
    let (train, val, bg) = pools();
    let mut t = Trainer::new(&tiny_config()).unwrap();
    t.run_epoch(&train, &val, &bg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ck = t.checkpoint();
    ck.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ck);
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());

    let mut back = Trainer::resume(&loaded).unwrap();
    t.model.set_mode(GateMode::Eval);
    back.model.set_mode(GateMode::Eval);
    let x = Tensor::stack(&val.iter().map(|s| &s.image).collect::<Vec<_>>()).unwrap();
    let a = t.model.predict(&x).unwrap();
    let b = back.model.predict(&x).unwrap();
    assert!(a.density.bit_eq(&b.density));
    assert!(a.confidence.unwrap().bit_eq(&b.confidence.unwrap()));
}

#[test]
fn damaged_checkpoints_have_distinct_errors() {
    let t = Trainer::new(&tiny_config()).unwrap();
    let bytes = t.checkpoint().to_bytes();
    match Checkpoint::from_bytes(&bytes[..bytes.len() - 100]) {
        Err(CheckpointError::Truncated { offset, .. }) => assert!(offset > 0),
        other => panic!("expected truncation, got {other:?}"),
    }
    let text = String::from_utf8_lossy(&bytes[..20]).into_owned();
    assert!(text.starts_with(&format!("stnet-checkpoint {CHECKPOINT_VERSION}")));
    let mut newer = bytes.clone();
    newer[17] = b'7';
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(CheckpointError::Version { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"not a checkpoint\n"), Err(CheckpointError::BadMagic)));

    let other = Trainer::new(&TrainConfig { d_channels: 18, ..tiny_config() }).unwrap();
    let mut store = other.model.params().clone();
    assert!(t.checkpoint().restore_params(&mut store).is_err());
}

#[test]
fn config_file_round_trip_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.conf");
    std::fs::write(
        &path,
        "# desk run\nseed = 3\nepochs = 12\nbatch_size = 8\nr = 0.25\nlr = 0.0005\n\
         d_channels = 36\nenhancer_count = 4\nleaf_assignment = forward\ncrop = 48\n\
         train_manifest = data/train/manifest.txt\n",
    )
    .unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!((cfg.seed, cfg.epochs, cfg.batch_size, cfg.d_channels), (3, 12, 8, 36));
    assert_eq!((cfg.lambda, cfg.lr), (0.25, 0.0005));
    assert_eq!(cfg.leaf_assignment, LeafAssignment::Forward);
    assert_eq!(TrainConfig::parse(&cfg.to_string()).unwrap(), cfg);

    let defaults = TrainConfig::parse("").unwrap();
    assert_eq!((defaults.batch_size, defaults.lr, defaults.d_channels), (16, 1e-4, 18));

    assert!(matches!(TrainConfig::parse("seed = 1\nfoo = 2"), Err(ConfigError::UnknownKey { line: 2, .. })));
    assert!(matches!(TrainConfig::parse("lambda = 0.1\nr = 0.2"), Err(ConfigError::Duplicate { line: 2, .. })));
    assert!(matches!(TrainConfig::parse("seed 4"), Err(ConfigError::Syntax { line: 1, .. })));
    assert!(matches!(TrainConfig::parse("lambda = 1"), Err(ConfigError::InvalidValue { .. })));
    assert!(matches!(TrainConfig::parse("d_channels = 20"), Err(ConfigError::InvalidValue { .. })));
    assert!(matches!(TrainConfig::load(&dir.path().join("absent")), Err(ConfigError::Io { .. })));
}

#[test]
fn cost_report_matches_closed_forms() {
    for d in [9, 18, 36] {
        let tree = count_params_flops(BlockKind::Tree, d, 8, 8).unwrap();
        let std = count_params_flops(BlockKind::Standard, d, 8, 8).unwrap();
        let dd = (d * d) as u64;
        assert_eq!(tree.measured_params, 5 * dd);
        assert_eq!(std.measured_params, 19 * dd);
        assert_eq!(tree.measured_params_with_bias, 5 * dd + 3 * d as u64);
        assert_eq!(tree.measured_macs, 5 * dd * 64);
        assert_eq!(std.measured_macs, 19 * dd * 64);
        assert!((tree.tree_to_standard_ratio() - 5.0 / 19.0).abs() < 1e-15);
    }
    let r = count_params_flops(BlockKind::Tree, 18, 8, 8).unwrap();
    assert_eq!((r.analytic_params(), r.max_rf()), (1620, 17));
    let f = count_params_flops_with(BlockKind::Tree, 18, 8, 8, LeafAssignment::Forward).unwrap();
    assert_eq!(f.max_rf(), 21);
    let rec = r.record();
    assert!(!rec.contains('\n'));
    assert!(rec.contains("params_measured=1620") && rec.contains("rf_max=17") && rec.contains("rf_max_alternative=21"));
    assert!(r.to_string().contains("forward assignment would give 21x21"));
}

#[test]
fn oracle_predictor_scores_zero() {
    let (_, val, bg) = pools();
    let all: Vec<CrowdSample> = val.into_iter().chain(bg).collect();
    let mut k = 0;
    let m = evaluate_with(&all, 2, |x| {
        let maps: Vec<Tensor> = (0..x.shape().n)
            .map(|_| {
                k += 1;
                all[k - 1].density_or_zeros()
            })
            .collect();
        Ok(Tensor::stack(&maps.iter().collect::<Vec<_>>())?)
    })
    .unwrap();
    assert_eq!((m.mae, m.mse), (0.0, 0.0));
    assert_eq!(m.per_image_counts.len(), 6);
    assert_eq!(true_count(&all[5]), 0.0);
    assert!(evaluate_with(&all, 4, |_| Ok(Tensor::zeros(Shape::new(1, 1, 2, 2)))).is_err());
}

proptest! {
    #[test]
    fn mae_never_exceeds_rmse(counts in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0), 1..40)) {
        let m = Metrics::from_counts(counts).unwrap();
        prop_assert!(m.mae <= m.mse * (1.0 + 1e-12) + 1e-12);
        let rec = m.record();
        prop_assert!(rec.starts_with("mae=") && !rec.contains('\n'));
    }
}
