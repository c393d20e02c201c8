//! Stochastic gradient Langevin dynamics.
//!
//! Every chain follows
//!
//! ```text
//! z_{t+1} = z_t - α_t ∇E(z_t) + sqrt(β_t) ε,   ε ~ N(0, I)
//! ```
//!
//! with `α_t` and `β_t` interpolated linearly over the run. The caller
//! supplies `∇E`; the sampler never evaluates energies unless a trace is
//! requested. Each chain draws its noise from its own ChaCha stream, so the
//! output does not depend on how chains are scheduled across threads.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mog::GaussianMixture;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgldSchedule {
    pub steps: usize,
    /// Step size `(start, end)`.
    pub step_size: (f64, f64),
    /// Noise scale `(start, end)`; the noise term is `sqrt(β_t) ε`.
    pub noise_scale: (f64, f64),
    /// Optional cap on the gradient norm; off unless set.
    pub grad_clip: Option<f64>,
}

impl SgldSchedule {
    pub fn new(steps: usize, step_size: (f64, f64), noise_scale: (f64, f64)) -> Result<Self> {
        let s = Self {
            steps,
            step_size,
            noise_scale,
            grad_clip: None,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant step size and noise scale.
    pub fn constant(steps: usize, step_size: f64, noise_scale: f64) -> Result<Self> {
        Self::new(steps, (step_size, step_size), (noise_scale, noise_scale))
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("SGLD needs at least one step".into()));
        }
        for (name, (start, end)) in [("step size", self.step_size), ("noise scale", self.noise_scale)] {
            if !(start > 0.0 && end > 0.0) || !start.is_finite() || !end.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} endpoints must be positive, got ({start}, {end})"
                )));
            }
            if start < end {
                return Err(Error::InvalidConfig(format!(
                    "{name} must decay: start {start} < end {end}"
                )));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("gradient clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    /// `(α_t, β_t)` for `0 <= t < steps`.
    pub fn at(&self, t: usize) -> Result<(f64, f64)> {
        if t >= self.steps {
            return Err(Error::OutOfRange(format!(
                "step {t} outside schedule of {} steps",
                self.steps
            )));
        }
        let frac = if self.steps == 1 {
            0.0
        } else {
            t as f64 / (self.steps - 1) as f64
        };
        let lerp = |(a, b): (f64, f64)| a + (b - a) * frac;
        Ok((lerp(self.step_size), lerp(self.noise_scale)))
    }
}

pub fn schedule_at(s: &SgldSchedule, t: usize) -> Result<(f64, f64)> {
    s.at(t)
}

/// Source of `∇_z E` for the sampler. Closures `Fn(z) -> ∇E(z)` implement it;
/// models with a faster batched gradient override [`gradient_batch`].
///
/// [`gradient_batch`]: GradientField::gradient_batch
pub trait GradientField: Sync {
    fn gradient(&self, z: ArrayView1<'_, f64>) -> Array1<f64>;

    fn gradient_batch(&self, zs: ArrayView2<'_, f64>) -> Array2<f64> {
        let rows: Vec<Array1<f64>> = (0..zs.nrows())
            .into_par_iter()
            .map(|i| self.gradient(zs.row(i)))
            .collect();
        let mut out = Array2::zeros(zs.raw_dim());
        for (i, g) in rows.iter().enumerate() {
            if g.len() == zs.ncols() {
                out.row_mut(i).assign(g);
            } else {
                out.row_mut(i).fill(f64::NAN);
            }
        }
        out
    }
}

impl<F> GradientField for F
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64> + Sync,
{
    fn gradient(&self, z: ArrayView1<'_, f64>) -> Array1<f64> {
        self(z)
    }
}

/// Identifies one chain's noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainKey {
    pub seed: u64,
    pub stream: u64,
}

impl ChainKey {
    fn rng(self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

/// Keys for `n` chains sharing one seed drawn from `rng`.
pub fn chain_keys<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> Vec<ChainKey> {
    let seed = rng.next_u64();
    (0..n as u64).map(|stream| ChainKey { seed, stream }).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    /// Mean energy over chains at `z_t`; NaN when no energy was supplied.
    pub mean_energy: f64,
    pub mean_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SgldRun {
    pub samples: Array2<f64>,
    pub trace: Vec<TraceRow>,
}

impl SgldRun {
    /// Gradient norm averaged over all steps and chains.
    pub fn mean_grad_norm(&self) -> f64 {
        self.trace.iter().map(|r| r.mean_grad_norm).sum::<f64>() / self.trace.len() as f64
    }
}

/// Full sampler: explicit chain keys and an optional batched energy used
/// only for the trace.
/// Batched energy used only for tracing.
pub type BatchEnergy<'a> = dyn Fn(ArrayView2<'_, f64>) -> Array1<f64> + Sync + 'a;

pub fn sgld_run<G: GradientField + ?Sized>(
    init: ArrayView2<'_, f64>,
    field: &G,
    schedule: &SgldSchedule,
    keys: &[ChainKey],
    trace_energy: Option<&BatchEnergy<'_>>,
) -> Result<SgldRun> {
    schedule.validate()?;
    let (b, d) = init.dim();
    if keys.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: keys.len(),
        });
    }
    if let Some(((chain, _), _)) = init.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite initial state in chain {chain}")));
    }
    let mut rngs: Vec<ChaCha8Rng> = keys.iter().map(|k| k.rng()).collect();
    let mut z = init.to_owned();
    let mut trace = Vec::with_capacity(schedule.steps);

    for t in 0..schedule.steps {
        let (alpha, beta) = schedule.at(t)?;
        let mean_energy = match trace_energy {
            Some(f) => f(z.view()).mean().unwrap_or(f64::NAN),
            None => f64::NAN,
        };
        let mut grads = field.gradient_batch(z.view());
        if grads.dim() != (b, d) {
            return Err(Error::ShapeMismatch(format!(
                "gradient batch is {:?}, expected ({b}, {d})",
                grads.dim()
            )));
        }
        let mut norm_sum = 0.0;
        let noise_sd = beta.sqrt();
        for (chain, rng) in rngs.iter_mut().enumerate() {
            let mut g = grads.row_mut(chain);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: t, chain });
            }
            let norm = g.dot(&g).sqrt();
            norm_sum += norm;
            if let Some(clip) = schedule.grad_clip {
                if norm > clip {
                    g.mapv_inplace(|v| v * clip / norm);
                }
            }
            let mut row = z.row_mut(chain);
            for i in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                row[i] += -alpha * g[i] + noise_sd * eps;
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: t, chain });
            }
        }
        trace.push(TraceRow {
            step: t,
            mean_energy,
            mean_grad_norm: norm_sum / b as f64,
        });
    }
    Ok(SgldRun { samples: z, trace })
}

/// Runs every chain for `schedule.steps` iterations and returns final states.
pub fn sgld_sample<G: GradientField + ?Sized, R: RngCore + ?Sized>(
    init: ArrayView2<'_, f64>,
    field: &G,
    schedule: &SgldSchedule,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let keys = chain_keys(rng, init.nrows());
    Ok(sgld_run(init, field, schedule, &keys, None)?.samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Draw from the fitted mixture `q`.
    #[default]
    Mog,
    /// Draw from `N(0, I)`.
    StandardNormal,
}

impl std::str::FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mog" => Ok(InitMode::Mog),
            "standard_normal" | "normal" => Ok(InitMode::StandardNormal),
            _ => Err(Error::InvalidConfig(format!("unknown init mode {s:?}"))),
        }
    }
}

impl InitMode {
    pub fn name(self) -> &'static str {
        match self {
            InitMode::Mog => "mog",
            InitMode::StandardNormal => "standard_normal",
        }
    }
}

pub fn sgld_init<R: Rng + ?Sized>(
    mode: InitMode,
    gm: Option<&GaussianMixture>,
    chains: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    match mode {
        InitMode::Mog => {
            let gm = gm.ok_or_else(|| {
                Error::InvalidConfig("mixture initialization needs a fitted mixture".into())
            })?;
            if gm.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: gm.dim(),
                });
            }
            gm.sample(chains, rng)
        }
        InitMode::StandardNormal => {
            if chains == 0 {
                return Err(Error::OutOfRange("chain count must be at least 1".into()));
            }
            Ok(Array2::from_shape_simple_fn((chains, dim), || rng.sample(StandardNormal)))
        }
    }
}

/// CSV with header `step,mean_energy,mean_grad_norm`.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,mean_energy,mean_grad_norm\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.step, r.mean_energy, r.mean_grad_norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use std::sync::atomic::{AtomicUsize, Ordering};

    const TINY: f64 = 1e-30;

    #[test]
    fn full_schedule_endpoints() {
        let s = SgldSchedule::new(20, (1e-6, 1e-7), (1e-3, 1e-4)).unwrap();
        assert_eq!(s.at(0).unwrap(), (1e-6, 1e-3));
        let (a, b) = s.at(19).unwrap();
        assert!((a - 1e-7).abs() < 1e-22);
        assert!((b - 1e-4).abs() < 1e-19);
        assert!(s.at(20).is_err());
    }

    #[test]
    fn midpoint_of_decay() {
        let s = SgldSchedule::new(3, (4.0, 2.0), (1.0, 1.0)).unwrap();
        assert_eq!(s.at(1).unwrap().0, 3.0);
        let one = SgldSchedule::new(1, (4.0, 2.0), (1.0, 1.0)).unwrap();
        assert_eq!(one.at(0).unwrap().0, 4.0);
    }

    #[test]
    fn schedule_validation() {
        assert!(SgldSchedule::new(0, (1.0, 1.0), (1.0, 1.0)).is_err());
        assert!(SgldSchedule::new(5, (1.0, 2.0), (1.0, 1.0)).is_err());
        assert!(SgldSchedule::new(5, (1.0, 0.0), (1.0, 1.0)).is_err());
        assert!(SgldSchedule::new(5, (1.0, 1.0), (-1.0, -1.0)).is_err());
    }

    #[test]
    fn contraction_on_quadratic() {
        let s = SgldSchedule::constant(1, 0.25, TINY).unwrap();
        let grad = |z: ArrayView1<'_, f64>| z.mapv(|v| 2.0 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = sgld_sample(array![[1.0]].view(), &grad, &s, &mut rng).unwrap();
        assert!((one[[0, 0]] - 0.5).abs() < 1e-12);
        let s2 = SgldSchedule::constant(2, 0.25, TINY).unwrap();
        let two = sgld_sample(array![[1.0]].view(), &grad, &s2, &mut rng).unwrap();
        assert!((two[[0, 0]] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let s = SgldSchedule::constant(10, 0.7, TINY).unwrap();
        let grad = |z: ArrayView1<'_, f64>| Array1::zeros(z.len());
        let init = array![[1.0, -2.0], [3.5, 0.25]];
        let out = sgld_sample(init.view(), &grad, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (a, b) in out.iter().zip(init.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn descent_on_convex_quadratic() {
        // E(z) = zᵀ A z / 2 with curvature up to 4; α = 0.1 < 1/4.
        let a = array![[4.0, 0.5], [0.5, 1.0]];
        let energy = |zs: ArrayView2<'_, f64>| {
            Array1::from_iter(zs.rows().into_iter().map(|z| 0.5 * z.dot(&a.dot(&z))))
        };
        let grad = |z: ArrayView1<'_, f64>| a.dot(&z);
        let s = SgldSchedule::new(200, (0.1, 0.05), (1e-8, 1e-9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = Array2::from_shape_simple_fn((64, 2), || rng.sample::<f64, _>(StandardNormal) * 3.0);
        let keys = chain_keys(&mut rng, 64);
        let run = sgld_run(init.view(), &grad, &s, &keys, Some(&energy)).unwrap();
        for w in run.trace[..11].windows(2) {
            assert!(w[1].mean_energy < w[0].mean_energy);
        }
        let csv = trace_to_csv(&run.trace);
        assert!(csv.starts_with("step,mean_energy,mean_grad_norm\n0,"));
        assert_eq!(csv.lines().count(), 201);
    }

    #[test]
    fn gradient_called_once_per_chain_step() {
        let calls = AtomicUsize::new(0);
        let grad = |z: ArrayView1<'_, f64>| {
            calls.fetch_add(1, Ordering::Relaxed);
            z.to_owned()
        };
        let s = SgldSchedule::constant(7, 0.1, 0.01).unwrap();
        let init = Array2::zeros((5, 3));
        sgld_sample(init.view(), &grad, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 35);
    }

    #[test]
    fn seeded_and_permutation_equivariant() {
        let grad = |z: ArrayView1<'_, f64>| z.mapv(|v| v.sin());
        let s = SgldSchedule::new(15, (0.1, 0.01), (0.1, 0.01)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let init = Array2::from_shape_simple_fn((6, 2), || rng.sample(StandardNormal));
        let keys = chain_keys(&mut rng, 6);
        let a = sgld_run(init.view(), &grad, &s, &keys, None).unwrap().samples;
        let b = sgld_run(init.view(), &grad, &s, &keys, None).unwrap().samples;
        assert_eq!(a, b);

        let perm = [3usize, 0, 5, 1, 4, 2];
        let pinit = init.select(Axis(0), &perm);
        let pkeys: Vec<ChainKey> = perm.iter().map(|&i| keys[i]).collect();
        let c = sgld_run(pinit.view(), &grad, &s, &pkeys, None).unwrap().samples;
        assert_eq!(c, a.select(Axis(0), &perm));
    }

    #[test]
    fn divergence_reports_step_and_chain() {
        let grad = |z: ArrayView1<'_, f64>| {
            if z[0] > 1.5 {
                array![f64::NAN]
            } else {
                array![-1.0]
            }
        };
        let s = SgldSchedule::constant(10, 1.0, TINY).unwrap();
        let init = array![[0.0], [1.0]];
        let err = sgld_sample(init.view(), &grad, &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap_err();
        match err {
            Error::Divergence { step, chain } => {
                assert_eq!((step, chain), (1, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn clipping_caps_the_step() {
        let mut s = SgldSchedule::constant(1, 1.0, TINY).unwrap();
        s.grad_clip = Some(0.5);
        let grad = |_: ArrayView1<'_, f64>| array![10.0];
        let out = sgld_sample(array![[0.0]].view(), &grad, &s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((out[[0, 0]] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = sgld_init(InitMode::StandardNormal, None, 100_000, 2, &mut rng).unwrap();
        let mean = z.mean_axis(Axis(0)).unwrap();
        let var = z.var_axis(Axis(0), 0.0);
        for i in 0..2 {
            assert!(mean[i].abs() < 0.02);
            assert!((var[i] - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn mog_init_needs_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(sgld_init(InitMode::Mog, None, 4, 2, &mut rng).is_err());
        let gm = GaussianMixture::from_parts(
            array![[2.0, -1.0]],
            Array2::eye(2) * 1e-12,
            array![1.0],
            1.0,
            0.0,
        )
        .unwrap();
        let z = sgld_init(InitMode::Mog, Some(&gm), 50, 2, &mut rng).unwrap();
        assert!(z.rows().into_iter().all(|r| (r[0] - 2.0).abs() < 1e-5 && (r[1] + 1.0).abs() < 1e-5));
        let a = sgld_init(InitMode::Mog, Some(&gm), 5, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sgld_init(InitMode::Mog, Some(&gm), 5, 2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
