use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use featebm::detectors::score_gaussian_batch;
use featebm::featurestore::{load_tensor, normalize_features, store_tensor, Archive, FeatureSet, TensorFile};
use featebm::mog::{fit_mog, GaussianMixture};
use ndarray::Array2;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_featebm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "featebm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path, kind: &str, per_class: usize) -> (PathBuf, PathBuf) {
    let out = dir.join(kind);
    ok(&["toy", "--kind", kind, "--samples-per-class", &per_class.to_string(), "--seed", "3", "--out-dir", s(&out)]);
    (out.join("features.fts"), out.join("labels.fts"))
}

fn tiny_train<'a>(f: &'a Path, l: &'a Path, extra: &[&'a str], out: &'a Path) -> Vec<&'a str> {
    let mut a = vec![
        "train", "--features", s(f), "--labels", s(l), "--out", s(out), "--epochs", "1", "--hidden-width", "16",
        "--hidden-layers", "2",
    ];
    a.extend_from_slice(extra);
    a
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn missing_labels_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _) = toy(dir.path(), "cross", 20);
    let missing = dir.path().join("nope.fts");
    let out = run(&["fit-mog", "--features", s(&f), "--labels", s(&missing), "--out", s(&dir.path().join("m.fta"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn mixture_archive_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = toy(dir.path(), "grid_crosses", 40);
    let arch = dir.path().join("mog.fta");
    ok(&["fit-mog", "--features", s(&f), "--labels", s(&l), "--out", s(&arch), "--temperature", "1"]);

    let fs = FeatureSet::load(&f, &l).unwrap();
    let direct = fit_mog(&fs, None, 1.0).unwrap();
    let reloaded = GaussianMixture::from_archive(&Archive::load(&arch).unwrap().sub_archive("mog.")).unwrap();
    let a = score_gaussian_batch(&direct, fs.features().view()).unwrap();
    let b = score_gaussian_batch(&reloaded, fs.features().view()).unwrap();
    let worst = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-12, "re-scored energies differ by {worst}");

    let manifest = read_json(&dir.path().join("mog.fta.manifest.json"));
    assert_eq!(manifest["command"], "fit-mog");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
}

#[test]
fn normalized_pipeline_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = toy(dir.path(), "cross", 60);
    let arch = dir.path().join("mog.fta");
    let scores = dir.path().join("scores.fts");
    ok(&["fit-mog", "--features", s(&f), "--labels", s(&l), "--out", s(&arch), "--normalize"]);
    ok(&["score", "--detector", "gaussian", "--model", s(&arch), "--features", s(&f), "--out", s(&scores)]);

    let fs = normalize_features(&FeatureSet::load(&f, &l).unwrap()).unwrap();
    let gm = fit_mog(&fs, None, featebm::mog::DEFAULT_TEMPERATURE).unwrap();
    let want: Vec<f32> = score_gaussian_batch(&gm, fs.features().view()).unwrap().iter().map(|&v| v as f32).collect();
    let got: Vec<f32> = load_tensor(&scores).unwrap().to_f64_vec().unwrap().iter().map(|&v| v as f32).collect();
    assert_eq!(got, want);

    let side = read_json(&dir.path().join("scores.fts.json"));
    assert_eq!(side["detector"], "gaussian");
    assert_eq!(side["count"], 120);
}

#[test]
fn same_seed_same_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = toy(dir.path(), "cross", 50);
    let arch = dir.path().join("mog.fta");
    ok(&["fit-mog", "--features", s(&f), "--labels", s(&l), "--out", s(&arch), "--temperature", "1"]);
    let (a, b) = (dir.path().join("a.fta"), dir.path().join("b.fta"));
    ok(&tiny_train(&f, &l, &["--mog", s(&arch), "--seed", "7"], &a));
    ok(&tiny_train(&f, &l, &["--mog", s(&arch), "--seed", "7"], &b));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let log = std::fs::read_to_string(dir.path().join("a.fta.log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "l_mle", "l_reg", "mean_pos_energy", "mean_neg_energy", "sgld_grad_norm"] {
        assert!(first.get(key).is_some(), "log lacks {key}");
    }
    let manifest = read_json(&dir.path().join("a.fta.manifest.json"));
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["epochs"], "1");
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = toy(dir.path(), "cross", 30);
    let cfg = dir.path().join("train.cfg");
    std::fs::write(&cfg, "epochs = 2\nhidden_width = 8\nlr = 0.001\n").unwrap();
    let out = dir.path().join("e.fta");
    ok(&[
        "train", "--features", s(&f), "--labels", s(&l), "--ebm", "--seed", "1", "--config", s(&cfg), "--epochs", "1",
        "--sgld-steps", "5", "--hidden-layers", "1", "--out", s(&out),
    ]);
    let m = read_json(&dir.path().join("e.fta.manifest.json"));
    assert_eq!(m["config"]["epochs"], "1");
    assert_eq!(m["config"]["hidden_width"], "8");
    assert_eq!(m["config"]["lr"], "0.001");
    assert_eq!(m["config"]["init_mode"], "standard_normal");

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let bad = run(&["train", "--features", s(&f), "--labels", s(&l), "--ebm", "--seed", "1", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = toy(dir.path(), "cross", 10);
    let out = dir.path().join("x.fta");
    let both = run(&["train", "--features", s(&f), "--labels", s(&l), "--ebm", "--mog", s(&out), "--seed", "1", "--out", s(&out)]);
    assert_eq!(both.status.code(), Some(2));
    let no_seed = run(&["train", "--features", s(&f), "--labels", s(&l), "--ebm", "--out", s(&out)]);
    assert_eq!(no_seed.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn singular_covariance_is_computational_failure() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("f.fts");
    let l = dir.path().join("l.fts");
    // Every point lies on the x axis, so the pooled covariance is singular.
    let feats = Array2::from_shape_fn((6, 2), |(i, j)| if j == 0 { i as f64 } else { 0.0 });
    store_tensor(&f, &TensorFile::from_matrix_f32(&feats).unwrap()).unwrap();
    store_tensor(&l, &TensorFile::from_labels(&[0, 0, 0, 1, 1, 1]).unwrap()).unwrap();
    let out = run(&["fit-mog", "--features", s(&f), "--labels", s(&l), "--out", s(&dir.path().join("m.fta")), "--shrinkage", "0"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn toy_end_to_end_grids_are_finite() {
    let dir = tempfile::tempdir().unwrap();
    let (f, l) = toy(dir.path(), "cross", 100);
    let arch = dir.path().join("mog.fta");
    let model = dir.path().join("model.fta");
    ok(&["fit-mog", "--features", s(&f), "--labels", s(&l), "--out", s(&arch), "--temperature", "1"]);
    ok(&tiny_train(&f, &l, &["--mog", s(&arch), "--seed", "2"], &model));
    for component in ["total", "gaussian", "net"] {
        let prefix = dir.path().join(format!("grid_{component}"));
        ok(&[
            "grid", "--model", s(&model), "--out", s(&prefix), "--lo", "-3", "--hi", "3", "--resolution", "25",
            "--component", component,
        ]);
        let g = load_tensor(prefix.with_extension("fts")).unwrap().to_matrix().unwrap();
        assert_eq!(g.dim(), (25, 25));
        assert!(g.iter().all(|v| v.is_finite()));
        let csv = std::fs::read_to_string(prefix.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 25 * 25);
    }
    let scores = dir.path().join("s.fts");
    ok(&["score", "--detector", "correction", "--model", s(&model), "--features", s(&f), "--out", s(&scores)]);
    let wrong = run(&["score", "--detector", "ebm", "--model", s(&model), "--features", s(&f), "--out", s(&scores)]);
    assert_eq!(wrong.status.code(), Some(2));
}

fn write_scores(p: &Path, v: &[f64]) {
    store_tensor(p, &TensorFile::from_vector_f32(v).unwrap()).unwrap();
}

#[test]
fn eval_reports_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let id = dir.path().join("id.fts");
    write_scores(&id, &[0.0, 0.1, 0.2, 0.3]);
    let mut oods = Vec::new();
    for (name, group, shift) in [("a", "near", 0.15), ("b", "mid", 0.25), ("c", "far", 5.0)] {
        let p = dir.path().join(format!("{name}.fts"));
        write_scores(&p, &[shift, shift + 0.1, shift + 0.2]);
        oods.push(format!("{name}:{group}:{}", s(&p)));
    }
    let report = dir.path().join("r.json");
    let csv = dir.path().join("t.csv");
    ok(&[
        "eval", "--id", s(&id), "--ood", &oods[0], "--ood", &oods[1], "--ood", &oods[2], "--out", s(&report), "--csv",
        s(&csv), "--method", "ours",
    ]);
    let r = read_json(&report);
    assert_eq!(r["schema"], 1);
    assert_eq!(r["datasets"][2]["auroc"], 1.0);
    assert_eq!(r["datasets"][2]["fpr95"], 0.0);
    assert!(r["groups"]["near"].is_object());
    let table = std::fs::read_to_string(&csv).unwrap();
    let header = table.lines().next().unwrap();
    for col in ["near_avg_fpr95", "mid_avg_auroc", "far_avg_auroc", "average_fpr95", "average_auroc"] {
        assert!(header.contains(col), "{header}");
    }
    assert!(table.lines().nth(1).unwrap().starts_with("ours,"));
}

#[test]
fn eval_disjoint_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (id, ood) = (dir.path().join("id.fts"), dir.path().join("ood.fts"));
    write_scores(&id, &[0.0, 1.0]);
    write_scores(&ood, &[2.0, 3.0]);
    let report = dir.path().join("r.json");
    ok(&["eval", "--id", s(&id), "--ood", &format!("x:{}", s(&ood)), "--out", s(&report)]);
    let r = read_json(&report);
    assert_eq!(r["datasets"][0]["auroc"], 1.0);
    assert_eq!(r["datasets"][0]["group"], "all");
    assert_eq!(r["average"]["auroc"], 1.0);
}

#[test]
fn knn_k_out_of_range() {
    let dir = tempfile::tempdir().unwrap();
    let (f, _) = toy(dir.path(), "cross", 5);
    let out = dir.path().join("k.fts");
    let res = run(&["score", "--detector", "knn", "--k", "11", "--train-features", s(&f), "--features", s(&f), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("k = 11"));
    ok(&["score", "--detector", "knn", "--k", "10", "--train-features", s(&f), "--features", s(&f), "--out", s(&out)]);
    assert_eq!(load_tensor(&out).unwrap().to_f64_vec().unwrap().len(), 10);
}

#[test]
fn logit_detectors() {
    let dir = tempfile::tempdir().unwrap();
    let logits = dir.path().join("logits.fts");
    store_tensor(&logits, &TensorFile::from_matrix_f32(&ndarray::array![[0.0, 0.0], [100.0, 0.0]]).unwrap()).unwrap();
    let out = dir.path().join("m.fts");
    ok(&["score", "--detector", "msp", "--logits", s(&logits), "--out", s(&out)]);
    let v = load_tensor(&out).unwrap().to_f64_vec().unwrap();
    assert_eq!(v[0], -0.5);
    assert!((v[1] + 1.0).abs() < 1e-6);
    ok(&["score", "--detector", "energy_logits", "--logits", s(&logits), "--out", s(&out)]);
    let v = load_tensor(&out).unwrap().to_f64_vec().unwrap();
    assert!((v[0] + std::f64::consts::LN_2).abs() < 1e-6);
    let bad = run(&["score", "--detector", "odin", "--temperature", "0", "--logits", s(&logits), "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}
