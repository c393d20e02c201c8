//! 2D toy datasets and energy grids.
//!
//! A cross is two axis-aligned bars centred on the same point. Each bar is
//! uniform along its arm and Gaussian across it, and is its own class.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::featurestore::{FeatureSet, TensorFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    Cross,
    /// Nine crosses on the lattice `{-p, 0, p}²`.
    GridCrosses,
}

impl ToyKind {
    pub fn name(self) -> &'static str {
        match self {
            ToyKind::Cross => "cross",
            ToyKind::GridCrosses => "grid_crosses",
        }
    }
}

impl FromStr for ToyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(ToyKind::Cross),
            "grid_crosses" | "grid" => Ok(ToyKind::GridCrosses),
            _ => Err(Error::InvalidConfig(format!("unknown toy kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub samples_per_class: usize,
    /// Half-length of each bar.
    pub arm_length: f64,
    /// Standard deviation across each bar.
    pub arm_thickness: f64,
    pub grid_pitch: f64,
    pub seed: u64,
}

impl ToySpec {
    pub fn cross(samples_per_class: usize, seed: u64) -> Self {
        Self {
            kind: ToyKind::Cross,
            samples_per_class,
            arm_length: 2.0,
            arm_thickness: 0.05,
            grid_pitch: 6.0,
            seed,
        }
    }

    pub fn grid_crosses(samples_per_class: usize, seed: u64) -> Self {
        Self {
            kind: ToyKind::GridCrosses,
            ..Self::cross(samples_per_class, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
            }
        };
        if self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("samples per class must be positive".into()));
        }
        positive(self.arm_length, "arm length")?;
        positive(self.arm_thickness, "arm thickness")?;
        if self.kind == ToyKind::GridCrosses {
            positive(self.grid_pitch, "grid pitch")?;
        }
        Ok(())
    }

    /// Cross centres in class order.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        match self.kind {
            ToyKind::Cross => vec![[0.0, 0.0]],
            ToyKind::GridCrosses => {
                let p = self.grid_pitch;
                let mut c = Vec::with_capacity(9);
                for y in [-p, 0.0, p] {
                    for x in [-p, 0.0, p] {
                        c.push([x, y]);
                    }
                }
                c
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        2 * self.centers().len()
    }

    /// Half-width of the square that holds the bars' centre lines.
    pub fn extent(&self) -> f64 {
        match self.kind {
            ToyKind::Cross => self.arm_length,
            ToyKind::GridCrosses => self.grid_pitch + self.arm_length,
        }
    }
}

/// Generates the dataset from `spec.seed`.
pub fn gen_toy(spec: &ToySpec) -> Result<FeatureSet> {
    gen_toy_with_rng(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}

/// Class `2i` is the horizontal bar of cross `i`, class `2i + 1` the vertical.
pub fn gen_toy_with_rng<R: Rng + ?Sized>(spec: &ToySpec, rng: &mut R) -> Result<FeatureSet> {
    spec.validate()?;
    let centers = spec.centers();
    let n = spec.samples_per_class * 2 * centers.len();
    let mut features = Array2::<f64>::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (i, c) in centers.iter().enumerate() {
        for bar in 0..2 {
            for _ in 0..spec.samples_per_class {
                let along = rng.random_range(-spec.arm_length..=spec.arm_length);
                let across = spec.arm_thickness * rng.sample::<f64, _>(StandardNormal);
                let (dx, dy) = if bar == 0 { (along, across) } else { (across, along) };
                features[[row, 0]] = c[0] + dx;
                features[[row, 1]] = c[1] + dy;
                labels.push(2 * i + bar);
                row += 1;
            }
        }
    }
    FeatureSet::new(features, labels, Some(2 * centers.len()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl GridBounds {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self { x: (lo, hi), y: (lo, hi) }
    }

    fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.x, self.y] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidConfig(format!("grid bounds ({lo}, {hi}) are not ordered")));
            }
        }
        Ok(())
    }
}

/// `R` evenly spaced points from `lo` to `hi`, both included.
fn axis(lo: f64, hi: f64, r: usize) -> Vec<f64> {
    let step = (hi - lo) / (r - 1) as f64;
    (0..r).map(|i| if i + 1 == r { hi } else { lo + step * i as f64 }).collect()
}

/// Energies on an `R × R` lattice; `values[[i, j]]` is at `(xs[j], ys[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGrid {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub values: Array2<f64>,
}

impl EnergyGrid {
    pub fn xs(&self) -> Vec<f64> {
        axis(self.bounds.x.0, self.bounds.x.1, self.resolution)
    }

    pub fn ys(&self) -> Vec<f64> {
        axis(self.bounds.y.0, self.bounds.y.1, self.resolution)
    }

    /// Lattice points in row-major order, one per row.
    pub fn points(bounds: GridBounds, resolution: usize) -> Array2<f64> {
        let xs = axis(bounds.x.0, bounds.x.1, resolution);
        let ys = axis(bounds.y.0, bounds.y.1, resolution);
        let mut p = Array2::zeros((resolution * resolution, 2));
        for (i, &y) in ys.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                p[[i * resolution + j, 0]] = x;
                p[[i * resolution + j, 1]] = y;
            }
        }
        p
    }

    /// Lowest cell as `(x, y, energy)`.
    pub fn argmin(&self) -> (f64, f64, f64) {
        let (xs, ys) = (self.xs(), self.ys());
        let mut best = (0, 0);
        for ((i, j), &v) in self.values.indexed_iter() {
            if v < self.values[best] {
                best = (i, j);
            }
        }
        (xs[best.1], ys[best.0], self.values[best])
    }

    pub fn to_csv(&self) -> String {
        let (xs, ys) = (self.xs(), self.ys());
        let mut out = String::from("x,y,energy\n");
        for (i, y) in ys.iter().enumerate() {
            for (j, x) in xs.iter().enumerate() {
                let _ = writeln!(out, "{x},{y},{}", self.values[[i, j]]);
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Result<TensorFile> {
        TensorFile::from_matrix_f64(&self.values)
    }
}

fn check_resolution(r: usize) -> Result<()> {
    if r < 2 {
        return Err(Error::InvalidConfig(format!("grid resolution must be at least 2, got {r}")));
    }
    Ok(())
}

fn assemble(bounds: GridBounds, r: usize, points: &Array2<f64>, v: Array1<f64>) -> Result<EnergyGrid> {
    if v.len() != r * r {
        return Err(Error::ShapeMismatch(format!("expected {} grid values, got {}", r * r, v.len())));
    }
    if let Some(k) = v.iter().position(|e| !e.is_finite()) {
        return Err(Error::NonFiniteScore {
            x: points[[k, 0]],
            y: points[[k, 1]],
        });
    }
    Ok(EnergyGrid {
        bounds,
        resolution: r,
        values: v.into_shape_with_order((r, r)).expect("r * r values"),
    })
}

/// Evaluates `score_fn` at every lattice point in parallel.
pub fn energy_grid<F>(score_fn: F, bounds: GridBounds, resolution: usize) -> Result<EnergyGrid>
where
    F: Fn(ArrayView1<'_, f64>) -> f64 + Sync,
{
    bounds.validate()?;
    check_resolution(resolution)?;
    let p = EnergyGrid::points(bounds, resolution);
    let v: Vec<f64> = (0..p.nrows()).into_par_iter().map(|i| score_fn(p.row(i))).collect();
    assemble(bounds, resolution, &p, Array1::from(v))
}

/// Same lattice, scored with one batched call.
pub fn energy_grid_batch<F>(score_fn: F, bounds: GridBounds, resolution: usize) -> Result<EnergyGrid>
where
    F: FnOnce(ArrayView2<'_, f64>) -> Result<Array1<f64>>,
{
    bounds.validate()?;
    check_resolution(resolution)?;
    let p = EnergyGrid::points(bounds, resolution);
    let v = score_fn(p.view())?;
    assemble(bounds, resolution, &p, v)
}

/// `n` points spread uniformly in angle on a circle of `radius`.
pub fn ring<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> Array2<f64> {
    let mut p = Array2::zeros((n, 2));
    for mut row in p.rows_mut() {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        row[0] = radius * a.cos();
        row[1] = radius * a.sin();
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mog::fit_mog;
    use ndarray::Axis;

    #[test]
    fn cross_stays_in_box() {
        let fs = gen_toy(&ToySpec::cross(2000, 1)).unwrap();
        assert_eq!(fs.len(), 4000);
        assert_eq!(fs.num_classes(), 2);
        let b = 2.0 + 5.0 * 0.05;
        assert!(fs.features().iter().all(|v| v.abs() <= b));
        assert_eq!(fs.class_counts(), vec![2000, 2000]);
    }

    #[test]
    fn grid_has_nine_centers() {
        let spec = ToySpec::grid_crosses(300, 4);
        let fs = gen_toy(&spec).unwrap();
        assert_eq!(fs.num_classes(), 18);
        let mut found = Vec::new();
        for c in 0..9 {
            let idx: Vec<usize> = (0..fs.len())
                .filter(|&i| fs.labels()[i] / 2 == c)
                .collect();
            let m = fs.features().select(Axis(0), &idx).mean_axis(Axis(0)).unwrap();
            let snap = [(m[0] / 6.0).round() * 6.0, (m[1] / 6.0).round() * 6.0];
            assert!((m[0] - snap[0]).abs() < 0.2 && (m[1] - snap[1]).abs() < 0.2);
            if !found.contains(&snap) {
                found.push(snap);
            }
        }
        assert_eq!(found.len(), 9);
    }

    #[test]
    fn seeded() {
        let a = gen_toy(&ToySpec::grid_crosses(50, 9)).unwrap();
        let b = gen_toy(&ToySpec::grid_crosses(50, 9)).unwrap();
        let c = gen_toy(&ToySpec::grid_crosses(50, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features(), c.features());
    }

    #[test]
    fn bad_spec() {
        let mut s = ToySpec::cross(10, 0);
        s.arm_thickness = 0.0;
        assert!(gen_toy(&s).is_err());
        s = ToySpec::cross(0, 0);
        assert!(gen_toy(&s).is_err());
    }

    #[test]
    fn squared_norm_grid() {
        let g = energy_grid(|z| z.dot(&z), GridBounds::square(-1.0, 1.0), 3).unwrap();
        let want = ndarray::array![[2.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 2.0]];
        assert_eq!(g.values, want);
        let c = energy_grid(|_| 4.5, GridBounds::square(-3.0, 2.0), 7).unwrap();
        assert!(c.values.iter().all(|&v| v == 4.5));
    }

    #[test]
    fn row_major_orientation() {
        let b = GridBounds { x: (0.0, 1.0), y: (10.0, 20.0) };
        let g = energy_grid(|z| z[0] + 100.0 * z[1], b, 2).unwrap();
        assert_eq!(g.values[[0, 1]], 1.0 + 1000.0);
        assert_eq!(g.values[[1, 0]], 2000.0);
        let csv = g.to_csv();
        assert_eq!(csv.lines().nth(2).unwrap(), "1,10,1001");
    }

    #[test]
    fn grid_errors() {
        assert!(energy_grid(|_| 0.0, GridBounds::square(-1.0, 1.0), 1).is_err());
        assert!(energy_grid(|_| 0.0, GridBounds::square(1.0, -1.0), 4).is_err());
        let e = energy_grid(|z| if z[0] > 0.9 { f64::NAN } else { 0.0 }, GridBounds::square(-1.0, 1.0), 3);
        assert!(matches!(e, Err(Error::NonFiniteScore { x, .. }) if x == 1.0));
    }

    #[test]
    fn cells_reevaluate_exactly() {
        let f = |z: ArrayView1<'_, f64>| (z[0] * 1.7).sin() + z[1].powi(3);
        let g = energy_grid(f, GridBounds::square(-2.0, 3.0), 11).unwrap();
        let p = EnergyGrid::points(g.bounds, 11);
        for (k, v) in g.values.iter().enumerate() {
            assert_eq!(*v, f(p.row(k)));
        }
        let gb = energy_grid_batch(|zs| Ok(zs.outer_iter().map(f).collect()), g.bounds, 11).unwrap();
        assert_eq!(gb, g);
    }

    #[test]
    fn mog_grid_minimum_near_a_mean() {
        let fs = gen_toy(&ToySpec::cross(500, 2)).unwrap();
        let gm = fit_mog(&fs, None, 1.0).unwrap();
        let r = 41;
        let g = energy_grid(|z| gm.energy(z).unwrap(), GridBounds::square(-3.0, 3.0), r).unwrap();
        let cell = 6.0 / (r - 1) as f64;
        let (x, y, _) = g.argmin();
        let near = gm
            .means()
            .outer_iter()
            .map(|m| ((m[0] - x).powi(2) + (m[1] - y).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(near <= cell * std::f64::consts::SQRT_2, "argmin ({x}, {y}) is {near} from a mean");
    }

    #[test]
    fn ring_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ring(100, 4.0, &mut rng);
        for r in p.outer_iter() {
            assert!(((r[0] * r[0] + r[1] * r[1]).sqrt() - 4.0).abs() < 1e-12);
        }
    }
}
