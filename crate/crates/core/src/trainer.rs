//! Maximum-likelihood training of the correction network and of the plain
//! EBM ablation.
//!
//! Each optimizer step draws a positive minibatch, perturbs it with small
//! Gaussian input noise, draws the same number of negatives with SGLD, and
//! minimizes
//!
//! ```text
//! L = mean(E(z+)) - mean(E(z-)) + α_reg · mean(E(z±)²)
//! ```
//!
//! over the raw network output `E`. The mixture energy does not depend on the
//! network parameters and is left out of the loss, but it is part of the SGLD
//! gradient for the correction model.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::energy_net::{layer_sizes, Activation, EnergyMlp};
use crate::error::{Error, Result};
use crate::featurestore::{Archive, FeatureSet, TensorFile};
use crate::mog::GaussianMixture;
use crate::sgld::{chain_keys, sgld_init, sgld_run, GradientField, InitMode, SgldSchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn check_batches(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() {
        return Err(Error::EmptyInput("positive energies"));
    }
    if neg.is_empty() {
        return Err(Error::EmptyInput("negative energies"));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `mean(pos) - mean(neg)`.
pub fn mle_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_batches(pos, neg)?;
    Ok(mean(pos) - mean(neg))
}

/// Mean of `E²` over both batches together.
pub fn l2_reg(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_batches(pos, neg)?;
    let sq: f64 = pos.iter().chain(neg).map(|e| e * e).sum();
    Ok(sq / (pos.len() + neg.len()) as f64)
}

/// Per-sample weights `∂L/∂E` for the MLE term alone.
pub fn mle_upstream(n_pos: usize, n_neg: usize) -> (Array1<f64>, Array1<f64>) {
    (
        Array1::from_elem(n_pos, 1.0 / n_pos as f64),
        Array1::from_elem(n_neg, -1.0 / n_neg as f64),
    )
}

/// Per-sample weights `∂L/∂E` for `l2 · l2_reg` alone.
pub fn reg_upstream(pos: &[f64], neg: &[f64], l2: f64) -> (Array1<f64>, Array1<f64>) {
    let n = (pos.len() + neg.len()) as f64;
    let w = |e: &f64| l2 * 2.0 * e / n;
    (pos.iter().map(w).collect(), neg.iter().map(w).collect())
}

/// Per-sample weights of the total loss.
pub fn total_upstream(pos: &[f64], neg: &[f64], l2: f64) -> (Array1<f64>, Array1<f64>) {
    let (mp, mn) = mle_upstream(pos.len(), neg.len());
    let (rp, rn) = reg_upstream(pos, neg, l2);
    (mp + rp, mn + rn)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub l2_coeff: f64,
    pub input_noise_std: f64,
    pub sgld: SgldSchedule,
    pub init_mode: InitMode,
    pub seed: u64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    /// Network energy is divided by this in sampling and scoring.
    pub net_temperature: f64,
}

impl TrainConfig {
    /// Correction-model recipe for 512-dimensional penultimate features.
    pub fn full_correction() -> Self {
        Self {
            epochs: 20,
            batch_size: 256,
            adam: AdamConfig {
                lr: 5e-6,
                ..AdamConfig::default()
            },
            l2_coeff: 10.0,
            input_noise_std: 1e-3,
            sgld: SgldSchedule {
                steps: 20,
                step_size: (1e-6, 1e-7),
                noise_scale: (1e-3, 1e-4),
                grad_clip: None,
            },
            init_mode: InitMode::Mog,
            seed: 0,
            hidden_width: 1024,
            hidden_layers: 4,
            activation: Activation::Silu,
            net_temperature: 1.0,
        }
    }

    /// Plain-EBM ablation recipe for 512-dimensional features.
    pub fn full_ebm() -> Self {
        Self {
            adam: AdamConfig {
                lr: 5e-5,
                ..AdamConfig::default()
            },
            l2_coeff: 0.1,
            sgld: SgldSchedule {
                steps: 200,
                step_size: (1e-2, 1e-3),
                noise_scale: (1e-2, 1e-3),
                grad_clip: None,
            },
            init_mode: InitMode::StandardNormal,
            net_temperature: 1e-2,
            ..Self::full_correction()
        }
    }

    /// Correction model for the 2D toy sets: width 128 and learning rate 1e-4.
    pub fn toy_correction() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            l2_coeff: 1.0,
            input_noise_std: 1e-3,
            sgld: SgldSchedule {
                steps: 20,
                step_size: (1e-2, 1e-3),
                noise_scale: (1e-2, 1e-3),
                grad_clip: None,
            },
            init_mode: InitMode::Mog,
            seed: 0,
            hidden_width: 128,
            hidden_layers: 4,
            activation: Activation::Silu,
            net_temperature: 1.0,
        }
    }

    /// Plain EBM for the 2D toy sets.
    pub fn toy_ebm() -> Self {
        Self {
            epochs: 2,
            l2_coeff: 0.1,
            sgld: SgldSchedule {
                steps: 200,
                step_size: (1e-2, 1e-3),
                noise_scale: (1e-2, 1e-3),
                grad_clip: None,
            },
            init_mode: InitMode::StandardNormal,
            net_temperature: 1e-2,
            ..Self::toy_correction()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.adam.lr >= 0.0) || !self.adam.lr.is_finite() {
            return bad(format!("learning rate must be nonnegative, got {}", self.adam.lr));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam.eps > 0.0) {
            return bad("adam epsilon must be positive".into());
        }
        if !(self.l2_coeff >= 0.0) {
            return bad(format!("L2 coefficient must be nonnegative, got {}", self.l2_coeff));
        }
        if !(self.input_noise_std >= 0.0) {
            return bad(format!("input noise std must be nonnegative, got {}", self.input_noise_std));
        }
        if self.hidden_width == 0 {
            return bad("hidden width must be positive".into());
        }
        if !(self.net_temperature > 0.0) {
            return bad(format!("network temperature must be positive, got {}", self.net_temperature));
        }
        self.sgld.validate()
    }
}

/// `p(z) ∝ exp(-(E_net(z)/T + E_G(z)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionModel {
    pub net: EnergyMlp,
    pub gm: GaussianMixture,
    pub net_temperature: f64,
}

impl CorrectionModel {
    pub fn new(net: EnergyMlp, gm: GaussianMixture, net_temperature: f64) -> Result<Self> {
        if net.input_dim() != gm.dim() {
            return Err(Error::DimensionMismatch {
                expected: gm.dim(),
                actual: net.input_dim(),
            });
        }
        Ok(Self {
            net,
            gm,
            net_temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.gm.dim()
    }

    pub fn energy(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self.net.energy(z)? / self.net_temperature + self.gm.energy(z)?)
    }

    pub fn energy_batch(&self, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let net = self.net.energy_batch(zs)?;
        zs.outer_iter()
            .zip(net.iter())
            .map(|(z, e)| Ok(e / self.net_temperature + self.gm.energy(z)?))
            .collect()
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert("kind", TensorFile::scalar_u32(0));
        a.insert("net.temperature", TensorFile::scalar_f64(self.net_temperature));
        a.extend_prefixed("net.", &self.net.to_archive()?);
        a.extend_prefixed("mog.", &self.gm.to_archive()?);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Self::new(
            EnergyMlp::from_archive(&a.sub_archive("net."))?,
            GaussianMixture::from_archive(&a.sub_archive("mog."))?,
            a.get("net.temperature")?.scalar()?,
        )
    }
}

/// Plain EBM: `p(z) ∝ exp(-E_net(z)/T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EbmModel {
    pub net: EnergyMlp,
    pub temperature: f64,
}

impl EbmModel {
    pub fn energy(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self.net.energy(z)? / self.temperature)
    }

    pub fn energy_batch(&self, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.net.energy_batch(zs)? / self.temperature)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert("kind", TensorFile::scalar_u32(1));
        a.insert("net.temperature", TensorFile::scalar_f64(self.temperature));
        a.extend_prefixed("net.", &self.net.to_archive()?);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Ok(Self {
            net: EnergyMlp::from_archive(&a.sub_archive("net."))?,
            temperature: a.get("net.temperature")?.scalar()?,
        })
    }
}

/// Either trained model, as stored in a model archive.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Correction(CorrectionModel),
    Ebm(EbmModel),
}

impl Model {
    pub fn to_archive(&self) -> Result<Archive> {
        match self {
            Model::Correction(m) => m.to_archive(),
            Model::Ebm(m) => m.to_archive(),
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        match a.get("kind")?.to_u32_vec()?[0] {
            0 => Ok(Model::Correction(CorrectionModel::from_archive(a)?)),
            1 => Ok(Model::Ebm(EbmModel::from_archive(a)?)),
            k => Err(Error::InvalidConfig(format!("unknown model kind {k}"))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Correction(m) => m.dim(),
            Model::Ebm(m) => m.net.input_dim(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_mle: f64,
    pub l_reg: f64,
    pub mean_pos_energy: f64,
    pub mean_neg_energy: f64,
    pub sgld_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: Vec<EpochLog>,
}

/// SGLD gradient `∇(E_net/T) + ∇E_G`, with the mixture term optional.
struct ModelField<'a> {
    net: &'a EnergyMlp,
    net_temperature: f64,
    gm: Option<&'a GaussianMixture>,
}

impl GradientField for ModelField<'_> {
    fn gradient(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self.gradient_batch(z.insert_axis(Axis(0))).row(0).to_owned()
    }

    fn gradient_batch(&self, zs: ArrayView2<'_, f64>) -> Array2<f64> {
        let nan = || Array2::from_elem(zs.raw_dim(), f64::NAN);
        let Ok((_, mut g)) = self.net.energy_and_grad_input_batch(zs) else {
            return nan();
        };
        g /= self.net_temperature;
        if let Some(gm) = self.gm {
            match gm.energy_and_grad_batch(zs) {
                Ok((_, gg)) => g += &gg,
                Err(_) => return nan(),
            }
        }
        g
    }
}

fn train_loop(
    fs: &FeatureSet,
    gm: Option<&GaussianMixture>,
    cfg: &TrainConfig,
) -> Result<(EnergyMlp, Vec<EpochLog>)> {
    cfg.validate()?;
    let d = fs.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = EnergyMlp::init(
        &layer_sizes(d, cfg.hidden_width, cfg.hidden_layers),
        cfg.activation,
        &mut rng,
    )?;
    let mut states: Vec<AdamState> = net.params().iter().map(|p| AdamState::new(p.len())).collect();
    let mut order: Vec<usize> = (0..fs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let b = idx.len();
            let mut pos = fs.features().select(Axis(0), idx);
            if cfg.input_noise_std > 0.0 {
                pos.mapv_inplace(|v| v + cfg.input_noise_std * rng.sample::<f64, _>(StandardNormal));
            }

            let init = sgld_init(cfg.init_mode, gm, b, d, &mut rng)?;
            let keys = chain_keys(&mut rng, b);
            let field = ModelField {
                net: &net,
                net_temperature: cfg.net_temperature,
                gm,
            };
            let run = sgld_run(init.view(), &field, &cfg.sgld, &keys, None)?;
            let neg = run.samples;

            let batch = concatenate(Axis(0), &[pos.view(), neg.view()])
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let energies = net.energy_batch(batch.view())?;
            let e_pos = energies.slice(s![..b]).to_vec();
            let e_neg = energies.slice(s![b..]).to_vec();
            let l_mle = mle_loss(&e_pos, &e_neg)?;
            let l_reg = l2_reg(&e_pos, &e_neg)?;
            if !(l_mle + cfg.l2_coeff * l_reg).is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }

            let (up_pos, up_neg) = total_upstream(&e_pos, &e_neg, cfg.l2_coeff);
            let upstream = concatenate(Axis(0), &[up_pos.view(), up_neg.view()])
                .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            let grads = net.grad_params(batch.view(), upstream.view())?;
            for ((p, g), st) in net.params_mut().into_iter().zip(grads.slices()).zip(&mut states) {
                adam_step(p, g, st, &cfg.adam)?;
            }
            if net.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch, step });
            }

            sums[0] += l_mle;
            sums[1] += l_reg;
            sums[2] += mean(&e_pos);
            sums[3] += mean(&e_neg);
            sums[4] += run.trace.iter().map(|r| r.mean_grad_norm).sum::<f64>() / run.trace.len() as f64;
            steps += 1;
        }
        let n = steps as f64;
        let entry = EpochLog {
            epoch,
            l_mle: sums[0] / n,
            l_reg: sums[1] / n,
            mean_pos_energy: sums[2] / n,
            mean_neg_energy: sums[3] / n,
            sgld_grad_norm: sums[4] / n,
        };
        log::debug!("{entry:?}");
        log.push(entry);
    }
    Ok((net, log))
}

/// Trains `E_net` on top of the fitted mixture with SGLD negatives started
/// from `q`.
pub fn train_correction(
    fs: &FeatureSet,
    gm: &GaussianMixture,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<CorrectionModel>> {
    if fs.dim() != gm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gm.dim(),
            actual: fs.dim(),
        });
    }
    if cfg.init_mode != InitMode::Mog {
        return Err(Error::InvalidConfig(
            "the correction model starts SGLD from the mixture (init_mode = mog)".into(),
        ));
    }
    let (net, log) = train_loop(fs, Some(gm), cfg)?;
    Ok(TrainOutcome {
        model: CorrectionModel::new(net, gm.clone(), cfg.net_temperature)?,
        log,
    })
}

/// Trains a plain EBM with SGLD negatives started from `N(0, I)`.
pub fn train_ebm(fs: &FeatureSet, cfg: &TrainConfig) -> Result<TrainOutcome<EbmModel>> {
    if cfg.init_mode != InitMode::StandardNormal {
        return Err(Error::InvalidConfig(
            "the plain EBM starts SGLD from N(0, I) (init_mode = standard_normal)".into(),
        ));
    }
    let (net, log) = train_loop(fs, None, cfg)?;
    Ok(TrainOutcome {
        model: EbmModel {
            net,
            temperature: cfg.net_temperature,
        },
        log,
    })
}
