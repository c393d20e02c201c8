use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use featebm::detectors::{self, Detector};
use featebm::featurestore::{load_tensor, normalize_features, normalize_rows, store_tensor, Archive, FeatureSet, TensorFile};
use featebm::metrics::{self, DatasetReport};
use featebm::mog::{self, GaussianMixture};
use featebm::toy::{energy_grid_batch, gen_toy, ring, GridBounds, ToyKind, ToySpec};
use featebm::trainer::{train_correction, train_ebm, CorrectionModel, Model};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config;
use crate::manifest::{default_path, RunManifest};
use crate::{EvalArgs, FitMogArgs, GridArgs, ScoreArgs, ToyArgs, TrainArgs};

const KIND_MIXTURE: u32 = 2;

/// Anything `score` and `grid` can load: a bare mixture or a trained model.
enum Stored {
    Mixture(GaussianMixture),
    Model(Model),
}

struct Loaded {
    stored: Stored,
    normalize: bool,
}

fn load_archive(path: &Path) -> Result<Loaded> {
    let a = Archive::load(path)?;
    let normalize = a.contains("normalize") && a.get("normalize")?.to_u32_vec()?[0] == 1;
    let kind = a.get("kind")?.to_u32_vec()?[0];
    let stored = if kind == KIND_MIXTURE {
        Stored::Mixture(GaussianMixture::from_archive(&a.sub_archive("mog."))?)
    } else {
        Stored::Model(Model::from_archive(&a)?)
    };
    Ok(Loaded { stored, normalize })
}

fn flag(b: bool) -> TensorFile {
    TensorFile::scalar_u32(u32::from(b))
}

fn load_features(features: &Path, labels: &Path, normalize: bool) -> Result<FeatureSet> {
    let fs = FeatureSet::load(features, labels)?;
    Ok(if normalize { normalize_features(&fs)? } else { fs })
}

fn load_matrix(path: &Path, normalize: bool) -> Result<Array2<f64>> {
    let m = load_tensor(path)?.to_matrix()?;
    Ok(if normalize { normalize_rows(&m)? } else { m })
}

pub fn fit_mog_archive(gm: &GaussianMixture, normalize: bool) -> Result<Archive> {
    let mut a = Archive::new();
    a.insert("kind", TensorFile::scalar_u32(KIND_MIXTURE));
    a.insert("normalize", flag(normalize));
    a.extend_prefixed("mog.", &gm.to_archive()?);
    Ok(a)
}

pub fn fit_mog(args: &FitMogArgs) -> Result<()> {
    let mut man = RunManifest::start("fit-mog");
    man.input(&args.features)?;
    man.input(&args.labels)?;
    let fs = load_features(&args.features, &args.labels, args.normalize)?;
    let gm = mog::fit_mog(&fs, args.shrinkage, args.temperature)?;
    fit_mog_archive(&gm, args.normalize)?.save(&args.out)?;

    man.set("temperature", args.temperature);
    man.set("shrinkage", gm.shrinkage());
    man.set("normalize", args.normalize);
    man.set("classes", gm.num_components());
    man.set("dim", gm.dim());
    man.artifact(&args.out);
    man.finish(&args.manifest.clone().unwrap_or_else(|| default_path(&args.out)))
}

fn train_overrides(args: &TrainArgs) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            m.insert(k.to_string(), v);
        }
    };
    let s = |v: Option<f64>| v.map(|x| x.to_string());
    let u = |v: Option<usize>| v.map(|x| x.to_string());
    put("preset", args.preset.clone());
    put("epochs", u(args.epochs));
    put("batch_size", u(args.batch_size));
    put("lr", s(args.lr));
    put("beta1", s(args.beta1));
    put("beta2", s(args.beta2));
    put("adam_eps", s(args.adam_eps));
    put("l2", s(args.l2));
    put("input_noise", s(args.input_noise));
    put("sgld_steps", u(args.sgld_steps));
    put("sgld_step_start", s(args.sgld_step_start));
    put("sgld_step_end", s(args.sgld_step_end));
    put("sgld_noise_start", s(args.sgld_noise_start));
    put("sgld_noise_end", s(args.sgld_noise_end));
    put("sgld_clip", s(args.sgld_clip));
    put("hidden_width", u(args.hidden_width));
    put("hidden_layers", u(args.hidden_layers));
    put("activation", args.activation.clone());
    put("net_temperature", s(args.net_temperature));
    m
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut man = RunManifest::start("train");
    man.input(&args.features)?;
    man.input(&args.labels)?;
    let mut values = match &args.config {
        Some(p) => {
            man.input(p)?;
            config::load_kv(p)?
        }
        None => BTreeMap::new(),
    };
    values.extend(train_overrides(args));
    let cfg = config::build(&values, args.ebm, args.seed)?;

    let (model, normalize, log) = match &args.mog {
        Some(mog_path) => {
            man.input(mog_path)?;
            let loaded = load_archive(mog_path)?;
            let Stored::Mixture(gm) = loaded.stored else {
                bail!("{} is not a mixture archive from fit-mog", mog_path.display());
            };
            let fs = load_features(&args.features, &args.labels, loaded.normalize)?;
            let out = train_correction(&fs, &gm, &cfg)?;
            (Model::Correction(out.model), loaded.normalize, out.log)
        }
        None => {
            let fs = load_features(&args.features, &args.labels, args.normalize)?;
            let out = train_ebm(&fs, &cfg)?;
            (Model::Ebm(out.model), args.normalize, out.log)
        }
    };

    let mut archive = model.to_archive()?;
    archive.insert("normalize", flag(normalize));
    archive.save(&args.out)?;

    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    for entry in &log {
        serde_json::to_writer(&mut f, entry)?;
        writeln!(f)?;
    }
    f.flush()?;

    man.config = config::describe(&cfg);
    man.set("model", if args.ebm { "ebm" } else { "correction" });
    man.set("normalize", normalize);
    man.seed = Some(args.seed);
    man.artifact(&args.out);
    man.artifact(&log_path);
    man.finish(&args.manifest.clone().unwrap_or_else(|| default_path(&args.out)))
}

fn parse_detector(args: &ScoreArgs) -> Result<Detector> {
    Ok(match args.detector.as_str() {
        "correction" => Detector::Correction,
        "ebm" => Detector::Ebm,
        "gaussian" => Detector::Gaussian,
        "mahalanobis" => Detector::Mahalanobis,
        "knn" => Detector::Knn { k: args.k },
        "msp" => Detector::Msp,
        "odin" => Detector::Odin {
            temperature: args.temperature.unwrap_or(1000.0),
        },
        "energy_logits" => Detector::EnergyLogits {
            temperature: args.temperature.unwrap_or(1.0),
        },
        other => bail!("unknown detector `{other}`"),
    })
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, det: &Detector) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| anyhow!("detector {} needs --{flag}", det.name()))
}

#[derive(Serialize)]
struct Sidecar<'a> {
    detector: &'a str,
    params: BTreeMap<String, String>,
    inputs: &'a BTreeMap<String, String>,
    count: usize,
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    let mut man = RunManifest::start("score");
    let det = parse_detector(args)?;

    let scores = if det.uses_logits() {
        let path = require(&args.logits, "logits", &det)?;
        man.input(path)?;
        detectors::score_logits_batch(&det, load_matrix(path, false)?.view())?
    } else if let Detector::Knn { k } = det {
        let path = require(&args.features, "features", &det)?;
        let train_path = require(&args.train_features, "train-features", &det)?;
        man.input(path)?;
        man.input(train_path)?;
        man.set("normalize", args.normalize);
        let train = load_matrix(train_path, args.normalize)?;
        let z = load_matrix(path, args.normalize)?;
        detectors::score_knn_batch(train.view(), z.view(), k)?
    } else {
        let path = require(&args.features, "features", &det)?;
        let model_path = require(&args.model, "model", &det)?;
        man.input(path)?;
        man.input(model_path)?;
        let loaded = load_archive(model_path)?;
        let z = load_matrix(path, loaded.normalize)?;
        let gm = match &loaded.stored {
            Stored::Mixture(gm) | Stored::Model(Model::Correction(CorrectionModel { gm, .. })) => Some(gm),
            Stored::Model(Model::Ebm(_)) => None,
        };
        match (det, &loaded.stored, gm) {
            (Detector::Correction, Stored::Model(Model::Correction(m)), _) => {
                detectors::score_correction_batch(m, z.view())?
            }
            (Detector::Ebm, Stored::Model(Model::Ebm(m)), _) => detectors::score_ebm_batch(m, z.view())?,
            (Detector::Gaussian, _, Some(gm)) => detectors::score_gaussian_batch(gm, z.view())?,
            (Detector::Mahalanobis, _, Some(gm)) => detectors::score_mahalanobis_batch(gm, z.view())?,
            _ => bail!("{} does not hold what detector {} needs", model_path.display(), det.name()),
        }
    };

    let scores = scores.to_vec();
    store_tensor(&args.out, &TensorFile::from_vector_f32(&scores)?)?;
    let sidecar_path = with_suffix(&args.out, ".json");
    let sidecar = Sidecar {
        detector: det.name(),
        params: det.params(),
        inputs: &man.inputs,
        count: scores.len(),
    };
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")
        .with_context(|| format!("writing {}", sidecar_path.display()))?;

    man.config.extend(det.params());
    man.set("detector", det.name());
    man.artifact(&args.out);
    man.artifact(&sidecar_path);
    man.finish(&args.manifest.clone().unwrap_or_else(|| default_path(&args.out)))
}

fn parse_ood(spec: &str) -> Result<(String, String, PathBuf)> {
    let parts: Vec<&str> = spec.splitn(3, ':').collect();
    match parts.as_slice() {
        [name, group, path] if !name.is_empty() && !group.is_empty() => {
            Ok((name.to_string(), group.to_string(), PathBuf::from(path)))
        }
        [name, path] if !name.is_empty() => Ok((name.to_string(), "all".to_string(), PathBuf::from(path))),
        _ => bail!("--ood expects NAME:GROUP:PATH or NAME:PATH, got `{spec}`"),
    }
}

fn sidecar_detector(scores: &Path) -> Option<String> {
    let text = std::fs::read_to_string(with_suffix(scores, ".json")).ok()?;
    let v: serde_json::Value = serde_json::from_str(&text).ok()?;
    v.get("detector")?.as_str().map(str::to_string)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let mut man = RunManifest::start("eval");
    man.input(&args.id)?;
    let id = load_tensor(&args.id)?.to_f64_vec()?;
    let method = args
        .method
        .clone()
        .or_else(|| sidecar_detector(&args.id))
        .unwrap_or_else(|| "scores".to_string());

    let mut reports = Vec::new();
    for spec in &args.ood {
        let (name, group, path) = parse_ood(spec)?;
        man.input(&path)?;
        let ood = load_tensor(&path)?.to_f64_vec()?;
        let report = metrics::evaluate(&id, &ood, args.tpr, &method, BTreeMap::new())
            .with_context(|| format!("evaluating {name}"))?;
        reports.push(DatasetReport { name, group, report });
    }

    let groups: BTreeMap<String, metrics::Average> = metrics::group_averages(&reports).into_iter().collect();
    let report = json!({
        "schema": 1,
        "method": method,
        "tpr": args.tpr,
        "n_id": id.len(),
        "gamma_id": metrics::threshold_gamma_id(&id, args.tpr)?,
        "datasets": reports,
        "groups": groups,
        "average": metrics::overall_average(&reports),
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&report)? + "\n")
        .with_context(|| format!("writing {}", args.out.display()))?;
    man.artifact(&args.out);
    if let Some(csv) = &args.csv {
        std::fs::write(csv, metrics::table_csv(&method, &reports)).with_context(|| format!("writing {}", csv.display()))?;
        man.artifact(csv);
    }
    man.set("tpr", args.tpr);
    man.set("method", &method);
    man.finish(&args.manifest.clone().unwrap_or_else(|| default_path(&args.out)))
}

pub fn toy(args: &ToyArgs) -> Result<()> {
    let mut man = RunManifest::start("toy");
    let spec = ToySpec {
        kind: args.kind.parse::<ToyKind>()?,
        samples_per_class: args.samples_per_class,
        arm_length: args.arm_length,
        arm_thickness: args.arm_thickness,
        grid_pitch: args.grid_pitch,
        seed: args.seed,
    };
    let fs = gen_toy(&spec)?;
    std::fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let fpath = args.out_dir.join("features.fts");
    let lpath = args.out_dir.join("labels.fts");
    store_tensor(&fpath, &TensorFile::from_matrix_f32(fs.features())?)?;
    let labels: Vec<u32> = fs.labels().iter().map(|&l| l as u32).collect();
    store_tensor(&lpath, &TensorFile::from_labels(&labels)?)?;
    man.artifact(&fpath);
    man.artifact(&lpath);
    if let Some(n) = args.ring {
        // Separate stream so adding a ring leaves the dataset unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(1);
        let rpath = args.out_dir.join("ring.fts");
        store_tensor(&rpath, &TensorFile::from_matrix_f32(&ring(n, 2.0 * spec.extent(), &mut rng))?)?;
        man.artifact(&rpath);
        man.set("ring", n);
    }
    man.set("kind", spec.kind.name());
    man.set("samples_per_class", spec.samples_per_class);
    man.set("arm_length", spec.arm_length);
    man.set("arm_thickness", spec.arm_thickness);
    man.set("grid_pitch", spec.grid_pitch);
    man.seed = Some(spec.seed);
    man.finish(&args.manifest.clone().unwrap_or_else(|| args.out_dir.join("toy.manifest.json")))
}

pub fn grid(args: &GridArgs) -> Result<()> {
    let mut man = RunManifest::start("grid");
    man.input(&args.model)?;
    let loaded = load_archive(&args.model)?;
    if loaded.normalize {
        log::warn!("model was trained on normalized features; the grid is evaluated in raw coordinates");
    }
    let bounds = GridBounds::square(args.lo, args.hi);
    let g = match (&loaded.stored, args.component.as_str()) {
        (Stored::Mixture(gm), "total" | "gaussian") => {
            energy_grid_batch(|z| detectors::score_gaussian_batch(gm, z), bounds, args.resolution)?
        }
        (Stored::Model(Model::Correction(m)), "total") => {
            energy_grid_batch(|z| detectors::score_correction_batch(m, z), bounds, args.resolution)?
        }
        (Stored::Model(Model::Correction(m)), "gaussian") => {
            energy_grid_batch(|z| detectors::score_gaussian_batch(&m.gm, z), bounds, args.resolution)?
        }
        (Stored::Model(Model::Correction(m)), "net") => energy_grid_batch(
            |z| Ok(m.net.energy_batch(z)? / m.net_temperature),
            bounds,
            args.resolution,
        )?,
        (Stored::Model(Model::Ebm(m)), "total" | "net") => {
            energy_grid_batch(|z| m.energy_batch(z), bounds, args.resolution)?
        }
        (_, c) => bail!("component `{c}` is not available in {}", args.model.display()),
    };
    let csv = with_suffix(&args.out, ".csv");
    let fts = with_suffix(&args.out, ".fts");
    std::fs::write(&csv, g.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    store_tensor(&fts, &g.to_tensor()?)?;
    man.set("lo", args.lo);
    man.set("hi", args.hi);
    man.set("resolution", args.resolution);
    man.set("component", &args.component);
    man.artifact(&csv);
    man.artifact(&fts);
    man.finish(&args.manifest.clone().unwrap_or_else(|| with_suffix(&args.out, ".manifest.json")))
}
