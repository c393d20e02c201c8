//! Class-conditional Gaussian mixture with a tied covariance.
//!
//! Two normalizations live side by side here. [`GaussianMixture::energy`] is
//! the reference energy used for scoring and sampling,
//!
//! ```text
//! E_G(z) = -(1/T_G) log Σ_c exp(-(z - μ_c)ᵀ Σ⁻¹ (z - μ_c))
//! ```
//!
//! with no mixing weights, no ½ factor and no normalizing constants.
//! [`GaussianMixture::log_density`] and [`GaussianMixture::sample`] use the
//! full density `q(z) = Σ_c π_c N(z; μ_c, Σ)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::featurestore::{Archive, FeatureSet, TensorFile};
use crate::linalg;
use crate::numeric::log_sum_exp;

/// Relative shrinkage used when none is given: `ε = 1e-6 · trace(Σ) / D`.
pub const DEFAULT_RELATIVE_SHRINKAGE: f64 = 1e-6;
/// Mixture temperature of the 512-dimensional recipe.
pub const DEFAULT_TEMPERATURE: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    means: Array2<f64>,
    covariance: Array2<f64>,
    cholesky: Array2<f64>,
    precision: Array2<f64>,
    mixing: Array1<f64>,
    temperature: f64,
    shrinkage: f64,
    // μ_c Σ⁻¹ and μ_cᵀ Σ⁻¹ μ_c, for the batched energy path.
    precision_means: Array2<f64>,
    mean_quads: Array1<f64>,
}

impl GaussianMixture {
    /// Builds a mixture from explicit parameters. `covariance` must already
    /// include any shrinkage; `shrinkage` is recorded, not applied.
    pub fn from_parts(
        means: Array2<f64>,
        covariance: Array2<f64>,
        mixing: Array1<f64>,
        temperature: f64,
        shrinkage: f64,
    ) -> Result<Self> {
        let d = means.ncols();
        let c = means.nrows();
        if c == 0 || d == 0 {
            return Err(Error::InvalidConfig("mixture needs at least one component".into()));
        }
        if covariance.dim() != (d, d) {
            return Err(Error::ShapeMismatch(format!(
                "covariance is {:?}, expected {d}x{d}",
                covariance.dim()
            )));
        }
        let cholesky =
            linalg::cholesky(&covariance).ok_or(Error::NotPositiveDefinite { shrinkage })?;
        Self::with_cholesky(means, covariance, cholesky, mixing, temperature, shrinkage)
    }

    fn with_cholesky(
        means: Array2<f64>,
        covariance: Array2<f64>,
        cholesky: Array2<f64>,
        mixing: Array1<f64>,
        temperature: f64,
        shrinkage: f64,
    ) -> Result<Self> {
        let (c, d) = means.dim();
        if mixing.len() != c {
            return Err(Error::ShapeMismatch(format!(
                "{} mixing weights for {c} components",
                mixing.len()
            )));
        }
        if cholesky.dim() != (d, d) || covariance.dim() != (d, d) {
            return Err(Error::ShapeMismatch("covariance factor shape".into()));
        }
        if mixing.iter().any(|&p| !(p >= 0.0)) || (mixing.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig("mixing weights must form a simplex".into()));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        if !(shrinkage >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "shrinkage must be nonnegative, got {shrinkage}"
            )));
        }
        if (0..d).any(|i| !(cholesky[[i, i]] > 0.0)) {
            return Err(Error::NotPositiveDefinite { shrinkage });
        }
        let precision = linalg::inverse_from_cholesky(&cholesky);
        let precision_means = means.dot(&precision);
        let mean_quads = (&precision_means * &means).sum_axis(Axis(1));
        Ok(Self {
            means,
            covariance,
            cholesky,
            precision,
            mixing,
            temperature,
            shrinkage,
            precision_means,
            mean_quads,
        })
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn num_components(&self) -> usize {
        self.means.nrows()
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.covariance
    }

    pub fn cholesky(&self) -> &Array2<f64> {
        &self.cholesky
    }

    pub fn precision(&self) -> &Array2<f64> {
        &self.precision
    }

    pub fn mixing(&self) -> &Array1<f64> {
        &self.mixing
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    /// Same parameters with a different energy temperature.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        Self::with_cholesky(
            self.means.clone(),
            self.covariance.clone(),
            self.cholesky.clone(),
            self.mixing.clone(),
            temperature,
            self.shrinkage,
        )
    }

    fn check_dim(&self, z: ArrayView1<'_, f64>) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: z.len(),
            });
        }
        Ok(())
    }

    fn quad_form(&self, z: ArrayView1<'_, f64>, c: usize) -> f64 {
        let d = self.dim();
        let mu = self.means.row(c);
        let diff: Vec<f64> = (0..d).map(|i| z[i] - mu[i]).collect();
        let mut q = 0.0;
        for i in 0..d {
            let mut row = 0.0;
            for j in 0..d {
                row += self.precision[[i, j]] * diff[j];
            }
            q += diff[i] * row;
        }
        q
    }

    /// `(z - μ_c)ᵀ Σ⁻¹ (z - μ_c)` for every component.
    pub fn quadratic_forms(&self, z: ArrayView1<'_, f64>) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok((0..self.num_components()).map(|c| self.quad_form(z, c)).collect())
    }

    /// Reference energy `E_G(z)`, temperature applied.
    pub fn energy(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        let neg: Vec<f64> = self.quadratic_forms(z)?.into_iter().map(|q| -q).collect();
        Ok(-log_sum_exp(&neg) / self.temperature)
    }

    /// Analytic `∇_z E_G(z)`: `(2/T_G) Σ_c w_c Σ⁻¹ (z - μ_c)` with softmax weights `w`.
    pub fn energy_grad(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let q = self.quadratic_forms(z)?;
        let w = softmax_neg(&q);
        // Σ_c w_c Σ⁻¹ (z - μ_c) = Σ⁻¹ (z - Σ_c w_c μ_c)
        let mut centered = z.to_owned();
        for (c, wc) in w.iter().enumerate() {
            centered.scaled_add(-wc, &self.means.row(c));
        }
        Ok(self.precision.dot(&centered) * (2.0 / self.temperature))
    }

    /// Energies and gradients for a batch of rows, via gemm.
    pub fn energy_and_grad_batch(&self, zs: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        if zs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: zs.ncols(),
            });
        }
        let pz = zs.dot(&self.precision);
        let cross = zs.dot(&self.precision_means.t());
        let self_quad = (&pz * &zs).sum_axis(Axis(1));
        let n = zs.nrows();
        let c = self.num_components();
        let mut energies = Array1::zeros(n);
        let mut grads = pz;
        for b in 0..n {
            let q: Vec<f64> = (0..c)
                .map(|k| (self_quad[b] - 2.0 * cross[[b, k]] + self.mean_quads[k]).max(0.0))
                .collect();
            let neg: Vec<f64> = q.iter().map(|v| -v).collect();
            energies[b] = -log_sum_exp(&neg) / self.temperature;
            let w = softmax_neg(&q);
            let mut g = grads.row_mut(b);
            for (k, wk) in w.iter().enumerate() {
                g.scaled_add(-wk, &self.precision_means.row(k));
            }
            g.mapv_inplace(|v| v * 2.0 / self.temperature);
        }
        Ok((energies, grads))
    }

    /// Nearest-center squared Mahalanobis distance; higher means more OOD.
    pub fn mahalanobis_score(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(self
            .quadratic_forms(z)?
            .into_iter()
            .fold(f64::INFINITY, f64::min))
    }

    /// `log q(z)` of the full normalized mixture.
    pub fn log_density(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        let d = self.dim() as f64;
        let log_det: f64 = 2.0 * self.cholesky.diag().iter().map(|v| v.ln()).sum::<f64>();
        let terms: Vec<f64> = self
            .quadratic_forms(z)?
            .into_iter()
            .zip(self.mixing.iter())
            .map(|(q, &p)| p.ln() - 0.5 * q)
            .collect();
        Ok(log_sum_exp(&terms) - 0.5 * d * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det)
    }

    /// Draws `n` rows from `q`: component by `π`, then `μ_c + L u`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::OutOfRange("sample count must be at least 1".into()));
        }
        let picker = WeightedIndex::new(self.mixing.iter().copied())
            .map_err(|e| Error::InvalidConfig(format!("mixing weights: {e}")))?;
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut u = Array1::<f64>::zeros(d);
        for mut row in out.rows_mut() {
            let c = picker.sample(rng);
            u.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            row.assign(&self.means.row(c));
            row += &self.cholesky.dot(&u);
        }
        Ok(out)
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert("means", TensorFile::from_matrix_f64(&self.means)?);
        a.insert("covariance", TensorFile::from_matrix_f64(&self.covariance)?);
        a.insert("cholesky", TensorFile::from_matrix_f64(&self.cholesky)?);
        a.insert("mixing", TensorFile::from_vector_f64(self.mixing.as_slice().unwrap())?);
        a.insert("temperature", TensorFile::scalar_f64(self.temperature));
        a.insert("shrinkage", TensorFile::scalar_f64(self.shrinkage));
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Self::with_cholesky(
            a.get("means")?.to_matrix()?,
            a.get("covariance")?.to_matrix()?,
            a.get("cholesky")?.to_matrix()?,
            a.get("mixing")?.to_vector()?,
            a.get("temperature")?.scalar()?,
            a.get("shrinkage")?.scalar()?,
        )
    }
}

fn softmax_neg(q: &[f64]) -> Vec<f64> {
    let m = q.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = q.iter().map(|v| (m - v).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Closed-form tied-covariance fit.
///
/// `π_c = N_c/N`, `μ_c` the class mean, and
/// `Σ = (1/N) Σ_c Σ_{i: y_i = c} (z_i - μ_c)(z_i - μ_c)ᵀ + ε I`.
/// With `shrinkage = None`, `ε = 1e-6 · trace(Σ)/D`.
pub fn fit_mog(fs: &FeatureSet, shrinkage: Option<f64>, temperature: f64) -> Result<GaussianMixture> {
    let counts = fs.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(Error::EmptyClass { class, count });
    }
    let (n, d) = (fs.len(), fs.dim());
    if n <= d {
        log::warn!("fitting a {d}-dimensional covariance from only {n} samples");
    }
    let c = fs.num_classes();
    let x = fs.features();

    let mut means = Array2::<f64>::zeros((c, d));
    for (i, &y) in fs.labels().iter().enumerate() {
        means.row_mut(y).scaled_add(1.0, &x.row(i));
    }
    for (k, mut row) in means.rows_mut().into_iter().enumerate() {
        row /= counts[k] as f64;
    }

    let mut centered = x.clone();
    for (i, &y) in fs.labels().iter().enumerate() {
        centered.row_mut(i).scaled_add(-1.0, &means.row(y));
    }
    let mut cov = centered.t().dot(&centered) / n as f64;
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (cov[[i, j]] + cov[[j, i]]);
            cov[[i, j]] = s;
            cov[[j, i]] = s;
        }
    }

    let eps = match shrinkage {
        Some(e) if e >= 0.0 => e,
        Some(e) => {
            return Err(Error::InvalidConfig(format!(
                "shrinkage must be nonnegative, got {e}"
            )))
        }
        None => DEFAULT_RELATIVE_SHRINKAGE * cov.diag().sum() / d as f64,
    };
    for i in 0..d {
        cov[[i, i]] += eps;
    }

    let mixing = Array1::from_iter(counts.iter().map(|&k| k as f64 / n as f64));
    let mixing = &mixing / mixing.sum();
    GaussianMixture::from_parts(means, cov, mixing, temperature, eps)
}

pub fn gaussian_energy(gm: &GaussianMixture, z: ArrayView1<'_, f64>) -> Result<f64> {
    gm.energy(z)
}

pub fn gaussian_energy_grad(gm: &GaussianMixture, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    gm.energy_grad(z)
}

pub fn mahalanobis_ood_score(gm: &GaussianMixture, z: ArrayView1<'_, f64>) -> Result<f64> {
    gm.mahalanobis_score(z)
}

pub fn sample_mog<R: Rng + ?Sized>(gm: &GaussianMixture, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    gm.sample(n, rng)
}
