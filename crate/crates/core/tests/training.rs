use featebm::featurestore::FeatureSet;
use featebm::mog::fit_mog;
use featebm::toy::{gen_toy, ToySpec};
use featebm::trainer::{train_correction, train_ebm, CorrectionModel, Model, TrainConfig};
use featebm::{featurestore::Archive, sgld::InitMode};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        hidden_width: 32,
        hidden_layers: 2,
        ..TrainConfig::toy_correction()
    }
}

fn cross(n: usize, seed: u64) -> FeatureSet {
    gen_toy(&ToySpec::cross(n, seed)).unwrap()
}

#[test]
fn zero_learning_rate_keeps_init() {
    let fs = cross(100, 0);
    let gm = fit_mog(&fs, None, 1.0).unwrap();
    let mut cfg = small_cfg();
    cfg.epochs = 1;
    cfg.adam.lr = 0.0;
    let trained = train_correction(&fs, &gm, &cfg).unwrap().model;
    // Same seed draws the same initial weights before any training step.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = featebm::energy_net::EnergyMlp::init(
        &featebm::energy_net::layer_sizes(2, cfg.hidden_width, cfg.hidden_layers),
        cfg.activation,
        &mut rng,
    )
    .unwrap();
    assert_eq!(trained.net, init);
}

#[test]
fn identical_seed_identical_model() {
    let fs = cross(150, 1);
    let gm = fit_mog(&fs, None, 1.0).unwrap();
    let a = train_correction(&fs, &gm, &small_cfg()).unwrap();
    let b = train_correction(&fs, &gm, &small_cfg()).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    let bytes = |m: &CorrectionModel| Model::Correction(m.clone()).to_archive().unwrap().to_bytes();
    assert_eq!(bytes(&a.model), bytes(&b.model));

    let mut other = small_cfg();
    other.seed = 1;
    let c = train_correction(&fs, &gm, &other).unwrap();
    assert_ne!(a.model.net, c.model.net);
}

#[test]
fn strong_regularization_collapses_energy() {
    let fs = cross(200, 2);
    let gm = fit_mog(&fs, None, 1.0).unwrap();
    let cfg = TrainConfig {
        l2_coeff: 1e6,
        epochs: 10,
        ..TrainConfig::toy_correction()
    };
    let m = train_correction(&fs, &gm, &cfg).unwrap().model;
    let e = m.net.energy_batch(fs.features().view()).unwrap();
    let mean_abs = e.mapv(f64::abs).mean().unwrap();
    assert!(mean_abs < 0.01, "mean |E| = {mean_abs}");
}

#[test]
fn trained_energy_lower_on_data_than_background() {
    let spec = ToySpec::cross(500, 3);
    let fs = gen_toy(&spec).unwrap();
    let gm = fit_mog(&fs, None, 1.0).unwrap();
    let out = train_correction(&fs, &gm, &TrainConfig::toy_correction()).unwrap();
    let last = out.log.last().unwrap();
    assert!(last.l_mle.abs() < 0.5, "final L_MLE {}", last.l_mle);

    let on_data = out.model.energy_batch(fs.features().view()).unwrap().mean().unwrap();
    let half = 2.0 * spec.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bg = Array2::from_shape_fn((2000, 2), |_| rng.random_range(-half..half));
    let background = out.model.energy_batch(bg.view()).unwrap().mean().unwrap();
    assert!(on_data < background, "{on_data} vs {background}");
}

#[test]
fn ebm_separates_blob_from_far_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let blob = |n: usize, rng: &mut ChaCha8Rng| {
        Array2::from_shape_fn((n, 2), |_| 0.5 + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
    };
    let fs = FeatureSet::new(blob(400, &mut rng), vec![0; 400], None).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        hidden_width: 32,
        hidden_layers: 2,
        adam: featebm::trainer::AdamConfig { lr: 1e-3, ..Default::default() },
        sgld: featebm::sgld::SgldSchedule::new(40, (1e-2, 1e-3), (1e-2, 1e-3)).unwrap(),
        ..TrainConfig::toy_ebm()
    };
    assert_eq!(cfg.init_mode, InitMode::StandardNormal);
    let m = train_ebm(&fs, &cfg).unwrap().model;
    let held = blob(500, &mut rng);
    let far = Array2::from_shape_fn((500, 2), |_| rng.random_range(3.0..5.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    let e_in = m.energy_batch(held.view()).unwrap().mean().unwrap();
    let e_far = m.energy_batch(far.view()).unwrap().mean().unwrap();
    assert!(e_in < e_far, "{e_in} vs {e_far}");
}

#[test]
fn model_archives_round_trip() {
    let fs = cross(100, 4);
    let gm = fit_mog(&fs, None, 1.0).unwrap();
    let m = Model::Correction(train_correction(&fs, &gm, &small_cfg()).unwrap().model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fta");
    m.to_archive().unwrap().save(&path).unwrap();
    let back = Model::from_archive(&Archive::load(&path).unwrap()).unwrap();
    assert_eq!(back, m);

    let ebm_cfg = TrainConfig { epochs: 1, hidden_width: 16, hidden_layers: 1, ..TrainConfig::toy_ebm() };
    let e = Model::Ebm(train_ebm(&fs, &ebm_cfg).unwrap().model);
    assert_eq!(Model::from_archive(&e.to_archive().unwrap()).unwrap(), e);
}

#[test]
fn init_mode_is_enforced() {
    let fs = cross(50, 5);
    let gm = fit_mog(&fs, None, 1.0).unwrap();
    assert!(train_correction(&fs, &gm, &TrainConfig::toy_ebm()).is_err());
    assert!(train_ebm(&fs, &TrainConfig::toy_correction()).is_err());
    let three_d = FeatureSet::new(Array2::zeros((4, 3)), vec![0, 0, 1, 1], None).unwrap();
    assert!(train_correction(&three_d, &gm, &small_cfg()).is_err());
}
