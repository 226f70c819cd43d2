use octflow::autodiff::ParamStore;
use octflow::dataset::{
    build_dataset, generate_bases, plan_dataset, synthesize_pair, AugmentConfig, BaseMapParams, DatasetManifest,
    Split, SyntheticPair,
};
use octflow::estimator::{ClassicalParams, ConvConfig, Network, PipelineModel, StageEstimator};
use octflow::field::DepthMap;
use octflow::loss::LossWeights;
use octflow::trainer::{
    evaluate_dataset, stage_metrics, train_pipeline, EvalConfig, MetricsReport, PrecomputedFlows, TrainConfig,
    TrainData, Trainer, METRICS_COLUMNS,
};
use octflow::Error;

const SIDE: usize = 32;

fn augment(pairs_per_base: usize) -> AugmentConfig {
    AugmentConfig {
        translation_sigma_vox: 1.5,
        rotation_sigma_rad: 0.02,
        depth_translation_sigma_vox: 3.0,
        noise_sigma: 0.0,
        pairs_per_base,
        seed: 4,
    }
}

fn pairs(n: usize) -> Vec<SyntheticPair<f32>> {
    let bases: Vec<DepthMap<f32>> = generate_bases(3, SIDE, SIDE, 2, &BaseMapParams::default()).unwrap();
    let m = plan_dataset(3, SIDE, SIDE, &augment(n)).unwrap();
    m.split(Split::Train)
        .take(n)
        .map(|r| synthesize_pair(&bases[r.base], &r.params(), 0.0, r.noise_seed).unwrap())
        .collect()
}

fn tiny(levels: usize) -> PipelineModel<f32> {
    let cfg = ConvConfig {
        widths: [4, 4, 8],
        blocks: 1,
        dropout: 0.1,
        ..ConvConfig::default()
    };
    PipelineModel::convolutional(levels, cfg, 7).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        lr: 1e-3,
        patience: 100,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn store(model: &PipelineModel<f32>, network: Network, s: usize) -> ParamStore<f32> {
    let net = match network {
        Network::Lateral => &model.lateral,
        Network::Depth => &model.depth,
    };
    match &net[s] {
        StageEstimator::Convolutional(c) => c.store.clone(),
        StageEstimator::Classical(_) => panic!("expected a convolutional stage"),
    }
}

#[test]
fn identical_seeds_give_identical_histories() {
    let data = TrainData::overfit(pairs(4));
    let run = || {
        let mut t = Trainer::new(tiny(1), config(3)).unwrap();
        t.train_stage(Network::Lateral, 0, &data).unwrap();
        (t.history.clone(), store(&t.model, Network::Lateral, 0))
    };
    let (h1, s1) = run();
    let (h2, s2) = run();
    assert_eq!(h1.len(), 3);
    assert_eq!(h1, h2);
    assert_eq!(s1, s2);
}

#[test]
fn only_the_active_stage_changes() {
    let data = TrainData::overfit(pairs(2));
    let model = tiny(2);
    let before = [
        store(&model, Network::Lateral, 0),
        store(&model, Network::Lateral, 1),
        store(&model, Network::Depth, 0),
        store(&model, Network::Depth, 1),
    ];
    let mut t = Trainer::new(model, config(2)).unwrap();
    t.train_stage(Network::Lateral, 1, &data).unwrap();
    assert_eq!(store(&t.model, Network::Lateral, 0), before[0]);
    assert_ne!(store(&t.model, Network::Lateral, 1), before[1]);
    assert_eq!(store(&t.model, Network::Depth, 0), before[2]);
    assert_eq!(store(&t.model, Network::Depth, 1), before[3]);
    assert_eq!(t.current(), Some((Network::Depth, 0)));
    assert!(matches!(t.train_stage(Network::Lateral, 0, &data), Err(Error::State(_))));
}

#[test]
fn stage_keeps_the_minimum_validation_checkpoint() {
    let data = TrainData {
        train: pairs(4),
        val: pairs(6)[4..].to_vec(),
    };
    let cfg = TrainConfig {
        lr: 3e-2,
        ..config(6)
    };
    let mut t = Trainer::new(tiny(1), cfg).unwrap();
    let mut snapshots = Vec::new();
    while t.current() == Some((Network::Lateral, 0)) {
        t.run_epoch(&data).unwrap();
        snapshots.push(store(&t.model, Network::Lateral, 0));
    }
    let (best, min) = t
        .history
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.val_loss.total_cmp(&b.1.val_loss))
        .map(|(i, r)| (i, r.val_loss))
        .unwrap();
    // the last snapshot was taken after the best parameters were restored
    let restored = snapshots.pop().unwrap();
    if best + 1 < t.history.len() {
        assert_eq!(restored, snapshots[best]);
    }
    let (val_loss, _) = stage_metrics(&t.model, Network::Lateral, 0, &data.val, &cfg).unwrap();
    assert_eq!(val_loss, min);
}

#[test]
fn resume_is_bit_exact() {
    let data = TrainData::overfit(pairs(4));
    let dir = tempfile::tempdir().unwrap();
    let mut a = Trainer::new(tiny(1), config(3)).unwrap();
    for _ in 0..4 {
        a.run_epoch(&data).unwrap();
    }
    a.save(dir.path()).unwrap();
    let mut b = Trainer::<f32>::load(dir.path()).unwrap();
    b.run(&data, None).unwrap();

    let mut c = Trainer::new(tiny(1), config(3)).unwrap();
    c.run(&data, None).unwrap();
    assert_eq!(b.history, c.history);
    for network in [Network::Lateral, Network::Depth] {
        assert_eq!(store(&b.model, network, 0), store(&c.model, network, 0));
    }
}

#[test]
fn pipeline_trains_lateral_then_depth() {
    let data = TrainData::overfit(pairs(2));
    let (model, history) = train_pipeline(tiny(2), &data, &config(1)).unwrap();
    let order: Vec<(Network, usize)> = history.iter().map(|r| (r.network, r.stage)).collect();
    assert_eq!(
        order,
        [(Network::Lateral, 0), (Network::Lateral, 1), (Network::Depth, 0), (Network::Depth, 1)]
    );
    assert_eq!(model.weights, LossWeights::default());
}

#[test]
fn unsupervised_mode_trains_without_ground_truth_term() {
    let data = TrainData::overfit(pairs(2));
    let weights = LossWeights {
        alpha: 0.0,
        ..LossWeights::default()
    };
    let cfg = TrainConfig { weights, ..config(2) };
    let (model, history) = train_pipeline(tiny(1), &data, &cfg).unwrap();
    assert!(model.manifest().unsupervised);
    assert!(history.iter().all(|r| r.train_loss.is_finite() && r.val_epe.is_finite()));
}

#[test]
fn single_stage_pipeline() {
    let data = TrainData::overfit(pairs(2));
    let mut t = Trainer::new(tiny(1), config(1)).unwrap();
    assert_eq!(t.current(), Some((Network::Lateral, 0)));
    t.run(&data, None).unwrap();
    assert!(t.is_finished());
    assert_eq!(t.history.len(), 2);
}

#[test]
fn training_errors() {
    let empty = TrainData::<f32> {
        train: Vec::new(),
        val: Vec::new(),
    };
    let mut t = Trainer::new(tiny(1), config(1)).unwrap();
    assert!(matches!(t.run_epoch(&empty), Err(Error::Config(_))));

    let classical = PipelineModel::<f32>::classical(1, ClassicalParams::default()).unwrap();
    assert!(matches!(Trainer::new(classical, config(1)), Err(Error::Config(_))));

    let exploding = TrainConfig {
        lr: 1e30,
        ..config(20)
    };
    let mut t = Trainer::new(tiny(1), exploding).unwrap();
    let data = TrainData::overfit(pairs(2));
    let err = t.run(&data, None).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err}");
}

fn dataset() -> (tempfile::TempDir, DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let bases: Vec<DepthMap<f64>> = generate_bases(3, SIDE, SIDE, 5, &BaseMapParams::default()).unwrap();
    let m = build_dataset(&bases, &augment(3), dir.path()).unwrap();
    (dir, m)
}

#[test]
fn perfect_predictions_score_zero() {
    let (dir, m) = dataset();
    let oracle = PrecomputedFlows {
        dir: dir.path().to_path_buf(),
    };
    let r = evaluate_dataset::<f32, _>(&oracle, dir.path(), &m, Split::Test, &EvalConfig::default()).unwrap();
    assert_eq!((r.mean_epe_vox, r.std_epe_vox, r.median_epe_vox), (0.0, 0.0, 0.0));
    assert_eq!(r.pairs.len(), 3);
    let csv = MetricsReport::to_csv(&[r]).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header, METRICS_COLUMNS);
    assert!(csv.lines().nth(1).unwrap().starts_with("test,0.0,0.0,0.0,0.0,"));
}

#[test]
fn evaluation_is_pure() {
    let (dir, m) = dataset();
    let model = PipelineModel::<f64>::classical(2, ClassicalParams::default()).unwrap();
    let cfg = EvalConfig {
        margin: 4,
        ..EvalConfig::default()
    };
    let a = evaluate_dataset(&model, dir.path(), &m, Split::Val, &cfg).unwrap();
    let b = evaluate_dataset(&model, dir.path(), &m, Split::Val, &cfg).unwrap();
    let epes = |r: &MetricsReport| r.pairs.iter().map(|p| (p.id, p.epe_vox)).collect::<Vec<_>>();
    assert_eq!(epes(&a), epes(&b));
    assert!(a.mean_epe_vox < 1.0, "{a}");
    assert_eq!(a.mean_epe_um, a.mean_epe_vox * 6.0);
}

#[test]
fn missing_pair_names_the_pair() {
    let (dir, m) = dataset();
    let victim = m.split(Split::Test).next().unwrap();
    std::fs::remove_file(dir.path().join(&victim.target)).unwrap();
    let model = PipelineModel::<f32>::classical(1, ClassicalParams::default()).unwrap();
    let err = evaluate_dataset(&model, dir.path(), &m, Split::Test, &EvalConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains(&format!("pair {}", victim.id)), "{err}");
}
