use proptest::prelude::*;
use spatem::checkpoint;
use spatem::synth::{self, ContextSequence, GeneratorConfig, MapSheet};
use spatem::train::{self, Confusion, Plateau, TrainConfig, TrainOptions};
use spatem::{ContextMode, Error, Model, ModelConfig, Variant};
use spatem_oracle as oracle;
use spatem_tensor::{ParamStore, Rng, Tensor};

fn tiny_sequences(n: usize, seed: u64) -> Vec<ContextSequence> {
    let cfg = GeneratorConfig { tile_size: 16, sheet_size: 128, jitter: 1, ..GeneratorConfig::default() };
    let sheets = synth::render_world(seed, &cfg);
    synth::sample_sequences(&sheets, n, &cfg, &mut Rng::new(seed)).unwrap()
}

fn tiny_model(mode: ContextMode) -> Model<f32> {
    Model::build(ModelConfig::tiny(Variant::Uspatem, mode), 3).unwrap()
}

fn quick(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: batch, seed: 9, ..TrainConfig::default() }
}

fn scalar_store(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new(&[values.len()], values.to_vec()).unwrap(), true).unwrap();
    s
}

#[test]
fn adam_leaves_parameters_alone_under_zero_gradient() {
    let mut s = scalar_store(&[0.5, -2.0, 3.0]);
    for t in 1..=3 {
        train::adam_step(&mut s, 1e-3, t, 0.9, 0.999, 1e-8).unwrap();
    }
    assert_eq!(s.by_name("w").unwrap().value.data(), [0.5, -2.0, 3.0]);
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut s = scalar_store(&[1.0, 2.0]);
    s.by_name_mut("w").unwrap().grad.fill(1.0);
    train::adam_step(&mut s, 1e-3, 1, 0.9, 0.999, 1e-8).unwrap();
    for (&after, before) in s.by_name("w").unwrap().value.data().iter().zip([1.0, 2.0]) {
        assert!(((before - after) - 1e-3).abs() < 1e-10, "{}", before - after);
    }
    assert!(train::adam_step(&mut s, 0.0, 2, 0.9, 0.999, 1e-8).is_err());
    assert!(train::adam_step(&mut s, -1e-3, 2, 0.9, 0.999, 1e-8).is_err());
}

#[test]
fn adam_matches_the_scalar_oracle_over_ten_steps() {
    let mut rng = Rng::new(17);
    for _ in 0..20 {
        let theta = rng.normal();
        let grads: Vec<f64> = (0..10).map(|_| 3.0 * rng.normal()).collect();
        let mut s = scalar_store(&[theta]);
        for (t, &g) in grads.iter().enumerate() {
            s.by_name_mut("w").unwrap().grad.fill(g);
            train::adam_step(&mut s, 1e-3, t as u64 + 1, 0.9, 0.999, 1e-8).unwrap();
        }
        let got = s.by_name("w").unwrap().value.data()[0];
        assert!((got - oracle::adam(theta, &grads, 1e-3)).abs() < 1e-10);
    }
}

#[test]
fn plateau_rule_examples() {
    let cfg = TrainConfig::default();
    let mut p = Plateau::new(&cfg);
    let rates: Vec<f64> = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9].iter().map(|&l| p.observe(l)).collect();
    assert_eq!(rates, [0.001, 0.001, 0.001, 0.001, 0.001, 0.0005]);
    assert_eq!(train::lr_schedule(&[1.0, 0.9, 0.9, 0.9, 0.9, 0.9], &cfg), 0.0005);

    let falling: Vec<f64> = (0..40).map(|i| 1.0 / (i + 1) as f64).collect();
    assert_eq!(train::lr_schedule(&falling, &cfg), 0.001);

    // 0.001 halves to 1.5625e-5, and the next decay lands exactly on the floor
    let mut p = Plateau::new(&cfg);
    let mut last = cfg.lr0;
    for _ in 0..200 {
        let lr = p.observe(1.0);
        assert!(lr <= last && lr >= cfg.lr_floor);
        last = lr;
    }
    assert_eq!(last, 1e-5);
    assert_eq!(last.to_bits(), cfg.lr_floor.to_bits());
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lr_decay: 1.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr_floor: 0.01, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(parsed, TrainConfig { epochs: 3, ..Default::default() });
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}

proptest! {
    #[test]
    fn lr_never_increases_and_respects_the_floor(losses in prop::collection::vec(0.0f64..2.0, 1..120)) {
        let cfg = TrainConfig::default();
        let mut p = Plateau::new(&cfg);
        let mut last = cfg.lr0;
        for l in losses {
            let lr = p.observe(l);
            prop_assert!(lr <= last && lr >= cfg.lr_floor);
            last = lr;
        }
    }

    #[test]
    fn f1_and_iou_are_symmetric(bits in prop::collection::vec(0u8..4, 4..200)) {
        let n = bits.len();
        let a = Tensor::new(&[1, 1, 1, n], bits.iter().map(|&b| (b & 1) as f32).collect()).unwrap();
        let b = Tensor::new(&[1, 1, 1, n], bits.iter().map(|&b| (b >> 1) as f32).collect()).unwrap();
        let ab = train::compute_metrics(&a, &b).unwrap();
        let ba = train::compute_metrics(&b, &a).unwrap();
        prop_assert_eq!(ab.per_class_f1, ba.per_class_f1);
        prop_assert_eq!(ab.per_class_iou, ba.per_class_iou);
        prop_assert!((0.0..=100.0).contains(&ab.mean_f1) && (0.0..=100.0).contains(&ab.miou));
    }
}

#[test]
fn metric_examples() {
    let c = Confusion { tp: 50, fp: 50, fn_: 0, tn: 0 };
    assert!((c.f1() - 200.0 / 3.0).abs() < 1e-12);
    assert!((c.iou() - 50.0).abs() < 1e-12);
    assert_eq!(Confusion::default().f1(), 100.0);

    let target = Tensor::new(&[1, 2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let same = train::compute_metrics(&target, &target).unwrap();
    assert_eq!((same.mean_f1, same.miou), (100.0, 100.0));

    let empty = Tensor::zeros(&[1, 2, 2, 2]);
    let m = train::compute_metrics(&empty, &target).unwrap();
    assert_eq!((m.per_class_f1[0], m.per_class_iou[0]), (0.0, 0.0));
    assert_eq!(m.mean_f1, (m.per_class_f1[0] + m.per_class_f1[1]) / 2.0);
    assert!(train::compute_metrics(&empty, &Tensor::zeros(&[1, 2, 2, 1])).is_err());
}

#[test]
fn loss_falls_over_the_first_five_steps() {
    let cfg = ModelConfig::desk(Variant::Uspatem, ContextMode::Both);
    let mut model = Model::<f32>::build(cfg.clone(), 0).unwrap();
    let gen = GeneratorConfig::default();
    let sheets: Vec<MapSheet> = synth::render_world(1, &GeneratorConfig { sheet_size: 384, ..gen.clone() });
    let seqs = synth::sample_sequences(&sheets, 2, &gen, &mut Rng::new(1)).unwrap();
    let (x, y) = train::make_batch(&cfg, &seqs).unwrap();
    let tc = TrainConfig::default();
    let mut rng = Rng::new(2);
    let losses: Vec<f64> = (1..=5).map(|t| train::train_step(&mut model, &x, &y, tc.lr0, t, &tc, &mut rng).unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    assert!(losses.iter().all(|l| (0.0..=1.0).contains(l)));
}

#[test]
fn epochs_take_ceil_n_over_b_steps() {
    let data = tiny_sequences(7, 1);
    let mut model = tiny_model(ContextMode::Both);
    let out = train::train(
        &mut model,
        &data[..5],
        &data[5..],
        &quick(2, 2),
        TrainOptions { out_dir: None, init_seed: 3, resume: None, max_new_epochs: None },
    )
    .unwrap();
    assert_eq!(out.records.iter().map(|r| r.steps).collect::<Vec<_>>(), [3, 3]);
    assert_eq!(out.state.step, 6);
    assert_eq!(out.state.lr_history, [1e-3, 1e-3]);
    assert_eq!(out.best_epoch.is_some(), out.records.iter().any(|r| r.improved));
}

#[test]
fn empty_sets_and_non_finite_losses_abort() {
    let data = tiny_sequences(4, 2);
    let mut model = tiny_model(ContextMode::SpatialOnly);
    let opts = || TrainOptions { out_dir: None, init_seed: 3, resume: None, max_new_epochs: None };
    assert!(matches!(train::train(&mut model, &data[..0], &data[..], &quick(1, 2), opts()), Err(Error::Data(_))));

    let mut broken = data.clone();
    broken[0].tiles.data_mut()[0] = f32::NAN;
    let err = train::train(&mut model, &broken[..], &data[..], &quick(1, 4), opts()).unwrap_err();
    assert!(err.is_numeric(), "{err}");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = tiny_sequences(6, 3);
    let (train_set, val_set) = (&data[..4], &data[4..]);
    let cfg = quick(3, 2);

    let mut straight = tiny_model(ContextMode::TemporalOnly);
    let full = train::train(
        &mut straight,
        train_set,
        val_set,
        &cfg,
        TrainOptions { out_dir: None, init_seed: 3, resume: None, max_new_epochs: None },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = tiny_model(ContextMode::TemporalOnly);
    let part = TrainOptions { out_dir: Some(dir.path()), init_seed: 3, resume: None, max_new_epochs: Some(1) };
    train::train(&mut first, train_set, val_set, &cfg, part).unwrap();
    let (mut resumed, manifest) = checkpoint::load(&dir.path().join("last")).unwrap();
    assert_eq!(manifest.train.as_ref().unwrap().epoch, 1);
    let rest = TrainOptions { out_dir: Some(dir.path()), init_seed: 3, resume: manifest.train, max_new_epochs: None };
    let second = train::train(&mut resumed, train_set, val_set, &cfg, rest).unwrap();

    assert_eq!(second.state, full.state);
    assert_eq!(checkpoint::encode(&resumed, 3, None), checkpoint::encode(&straight, 3, None));
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 3);
}

#[test]
fn checkpoints_round_trip_and_evaluate_identically() {
    let data = tiny_sequences(6, 4);
    let mut model = tiny_model(ContextMode::Both);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions { out_dir: Some(dir.path()), init_seed: 3, resume: None, max_new_epochs: None };
    let out = train::train(&mut model, &data[..4], &data[4..], &quick(1, 2), opts).unwrap();

    let (loaded, manifest) = checkpoint::load(&dir.path().join("last")).unwrap();
    assert_eq!(manifest.train.as_ref(), Some(&out.state));
    assert_eq!(checkpoint::encode(&loaded, 3, Some(&out.state)), checkpoint::encode(&model, 3, Some(&out.state)));
    let tc = quick(1, 2);
    let a = train::evaluate(&model, &data[..], 3, &tc).unwrap();
    let b = train::evaluate(&loaded, &data[..], 3, &tc).unwrap();
    assert_eq!(a, b);
    assert!(dir.path().join("best").join(checkpoint::MANIFEST).exists());
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = tiny_model(ContextMode::SpatialOnly);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &model, 3, None).unwrap();
    let blob = dir.path().join(checkpoint::BLOB);
    let mut bytes = std::fs::read(&blob).unwrap();
    bytes[10] ^= 1;
    std::fs::write(&blob, &bytes).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Corrupt { .. })));
    std::fs::remove_file(&blob).unwrap();
    assert!(matches!(checkpoint::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn pairs_are_scored_by_lake_minus_river_probability() {
    let mut t = Tensor::<f32>::zeros(&[4, 2, 2]);
    t.data_mut()[synth::LAKE * 4..synth::LAKE * 4 + 4].fill(0.6);
    t.data_mut()[synth::RIVER * 4..synth::RIVER * 4 + 4].fill(0.4);
    assert!((train::pair_score(&t) - 0.2).abs() < 1e-6);

    use synth::PairMember::{Lake, River};
    // pair 0 right, pair 1 wrong, pair 2 tied, pair 3 incomplete
    let scores = [(0, Lake, 0.3), (0, River, 0.1), (1, River, 0.5), (1, Lake, -0.2), (2, Lake, 0.0), (2, River, 0.0), (3, Lake, 1.0)];
    assert_eq!(train::pair_accuracy(&scores), Some(50.0));
    assert_eq!(train::pair_accuracy(&scores[..2]), Some(100.0));
    assert_eq!(train::pair_accuracy(&scores[6..]), None);
}

#[test]
fn whole_sheets_are_stitched_from_tiles() {
    let model = tiny_model(ContextMode::Both);
    let gen = GeneratorConfig { tile_size: 16, sheet_size: 56, jitter: 1, ..GeneratorConfig::default() };
    let sheets = synth::render_world(2, &gen);
    let window: Vec<&MapSheet> = sheets.iter().collect();
    let probs = train::predict_sheet(&model, &window, synth::TEMPORAL_SPAN, 8).unwrap();
    assert_eq!(probs.shape(), [4, 56, 56]);
    assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
    // a tile aligned with the grid reproduces the stitched crop's centre
    let seq = synth::sequence_at(&window, synth::TEMPORAL_SPAN, 8, 8, 16, None);
    let (x, _) = train::make_batch(model.config(), &[seq]).unwrap();
    let tile = model.predict(&x).unwrap();
    assert_eq!(probs.data()[16 * 56 + 16], tile.data()[8 * 16 + 8]);
    let m = train::evaluate_sheets(&model, &[2], &gen, 8, 0.5).unwrap();
    assert_eq!(m.confusion.iter().map(|c| c.tp + c.fp + c.fn_ + c.tn).collect::<Vec<_>>(), [56 * 56; 4]);
}
