//! OOD scores with one orientation: higher means more likely OOD.
//!
//! Baselines that natively score in-distribution-ness (MSP, temperature
//! scaling, KNN) are negated here.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mog::GaussianMixture;
use crate::numeric::{log_sum_exp, softmax};
use crate::trainer::{CorrectionModel, EbmModel, Model};

/// Scores for a batch plus the detector that produced them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OodScore {
    pub detector: String,
    pub params: BTreeMap<String, String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Detector {
    /// `E_net/T + E_G` from a correction-model archive.
    Correction,
    /// `E_net/T` from a plain-EBM archive.
    Ebm,
    /// `E_G` alone, from a mixture or the mixture inside a correction model.
    Gaussian,
    /// Minimum Mahalanobis distance to a class mean.
    Mahalanobis,
    Knn { k: usize },
    Msp,
    Odin { temperature: f64 },
    EnergyLogits { temperature: f64 },
}

impl Detector {
    pub fn name(&self) -> &'static str {
        match self {
            Detector::Correction => "correction",
            Detector::Ebm => "ebm",
            Detector::Gaussian => "gaussian",
            Detector::Mahalanobis => "mahalanobis",
            Detector::Knn { .. } => "knn",
            Detector::Msp => "msp",
            Detector::Odin { .. } => "odin",
            Detector::EnergyLogits { .. } => "energy_logits",
        }
    }

    pub fn params(&self) -> BTreeMap<String, String> {
        let mut p = BTreeMap::new();
        match self {
            Detector::Knn { k } => {
                p.insert("k".into(), k.to_string());
            }
            Detector::Odin { temperature } | Detector::EnergyLogits { temperature } => {
                p.insert("temperature".into(), temperature.to_string());
            }
            _ => {}
        }
        p
    }

    /// Whether the detector reads classifier logits rather than features.
    pub fn uses_logits(&self) -> bool {
        matches!(self, Detector::Msp | Detector::Odin { .. } | Detector::EnergyLogits { .. })
    }

    pub fn wrap(&self, scores: Vec<f64>) -> OodScore {
        OodScore {
            detector: self.name().to_string(),
            params: self.params(),
            scores,
        }
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::OutOfRange(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

pub fn score_correction(m: &CorrectionModel, z: ArrayView1<'_, f64>) -> Result<f64> {
    check_dim(m.dim(), z.len())?;
    m.energy(z)
}

pub fn score_correction_batch(m: &CorrectionModel, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_dim(m.dim(), zs.ncols())?;
    m.energy_batch(zs)
}

pub fn score_ebm(m: &EbmModel, z: ArrayView1<'_, f64>) -> Result<f64> {
    m.energy(z)
}

pub fn score_ebm_batch(m: &EbmModel, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    m.energy_batch(zs)
}

/// Energy under any stored model.
pub fn score_model_batch(m: &Model, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    match m {
        Model::Correction(c) => score_correction_batch(c, zs),
        Model::Ebm(e) => score_ebm_batch(e, zs),
    }
}

pub fn score_gaussian_batch(gm: &GaussianMixture, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_dim(gm.dim(), zs.ncols())?;
    zs.axis_iter(Axis(0)).map(|z| gm.energy(z)).collect()
}

pub fn score_mahalanobis_batch(gm: &GaussianMixture, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_dim(gm.dim(), zs.ncols())?;
    let v: Vec<f64> = (0..zs.nrows())
        .into_par_iter()
        .map(|i| gm.mahalanobis_score(zs.row(i)))
        .collect::<Result<_>>()?;
    Ok(Array1::from(v))
}

/// Distance from `z` to its `k`-th nearest training row.
pub fn score_knn(train: ArrayView2<'_, f64>, z: ArrayView1<'_, f64>, k: usize) -> Result<f64> {
    let n = train.nrows();
    if k == 0 || k > n {
        return Err(Error::OutOfRange(format!("k = {k} outside 1..={n}")));
    }
    check_dim(train.ncols(), z.len())?;
    let mut d2: Vec<f64> = train
        .axis_iter(Axis(0))
        .map(|row| row.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let (_, kth, _) = d2.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(kth.sqrt())
}

pub fn score_knn_batch(train: ArrayView2<'_, f64>, zs: ArrayView2<'_, f64>, k: usize) -> Result<Array1<f64>> {
    let v: Vec<f64> = (0..zs.nrows())
        .into_par_iter()
        .map(|i| score_knn(train, zs.row(i), k))
        .collect::<Result<_>>()?;
    Ok(Array1::from(v))
}

fn neg_max_softmax(scaled: &[f64]) -> f64 {
    -softmax(scaled).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Negative maximum softmax probability.
pub fn score_msp(logits: &[f64]) -> f64 {
    neg_max_softmax(logits)
}

/// Negative maximum softmax probability at temperature `t`, without input
/// perturbation.
pub fn score_odin_temperature(logits: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    Ok(neg_max_softmax(&scaled))
}

/// `-t · logsumexp(logits / t)`.
pub fn score_energy_logits(logits: &[f64], t: f64) -> Result<f64> {
    check_temperature(t)?;
    let scaled: Vec<f64> = logits.iter().map(|l| l / t).collect();
    Ok(-t * log_sum_exp(&scaled))
}

/// Applies a logit-based detector to every row.
pub fn score_logits_batch(det: &Detector, logits: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let f = |row: Vec<f64>| match det {
        Detector::Msp => Ok(score_msp(&row)),
        Detector::Odin { temperature } => score_odin_temperature(&row, *temperature),
        Detector::EnergyLogits { temperature } => score_energy_logits(&row, *temperature),
        other => Err(Error::InvalidConfig(format!("{} does not score logits", other.name()))),
    };
    logits.axis_iter(Axis(0)).map(|r| f(r.to_vec())).collect()
}
