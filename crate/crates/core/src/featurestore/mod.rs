//! Feature, logit and label tensors: loading, validation and normalization.

mod archive;
mod container;

pub use archive::{Archive, ARCHIVE_MAGIC};
pub use container::{load_tensor, store_tensor, DType, TensorData, TensorFile, MAGIC, VERSION};

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

/// Rows with a smaller Euclidean norm cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// In-distribution features with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl FeatureSet {
    /// Validates labels and finiteness. `num_classes` defaults to `max(label) + 1`.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: Option<usize>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(Error::InvalidFeatures("feature matrix is empty".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::InvalidFeatures(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        let seen = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(seen);
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::InvalidFeatures(format!(
                "label {label} at row {row} is not below {num_classes} classes"
            )));
        }
        if let Some(((row, col), v)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidFeatures(format!(
                "non-finite value {v} at row {row}, column {col}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Loads a rank-2 f32 feature tensor and a rank-1 u32 label tensor.
    pub fn load(features: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Self> {
        let x = load_tensor(features)?.to_matrix()?;
        let y = load_tensor(labels)?
            .to_u32_vec()?
            .into_iter()
            .map(|l| l as usize)
            .collect();
        Self::new(x, y, None)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order, with their labels.
    pub fn select(&self, indices: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>, usize) {
        (self.features, self.labels, self.num_classes)
    }
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(features: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = features.clone();
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = r.dot(&r).sqrt();
        if !(norm >= MIN_ROW_NORM) {
            return Err(Error::DegenerateFeature { row, norm });
        }
        r.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

pub fn normalize_features(fs: &FeatureSet) -> Result<FeatureSet> {
    Ok(FeatureSet {
        features: normalize_rows(&fs.features)?,
        labels: fs.labels.clone(),
        num_classes: fs.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_four_five() {
        let fs = FeatureSet::new(array![[3.0, 4.0]], vec![0], None).unwrap();
        let n = normalize_features(&fs).unwrap();
        assert!((n.features()[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((n.features()[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn unit_row_unchanged() {
        let s = 0.5f64.sqrt();
        let fs = FeatureSet::new(array![[s, -s], [1.0, 0.0]], vec![0, 1], None).unwrap();
        let n = normalize_features(&fs).unwrap();
        for (a, b) in n.features().iter().zip(fs.features()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn random_rows_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((100, 16), |_| rng.random_range(-5.0..5.0));
        let n = normalize_rows(&x).unwrap();
        for r in n.rows() {
            let norm: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_row_names_its_index() {
        let x = array![[1.0, 0.0], [0.0, 0.0], [2.0, 2.0]];
        match normalize_rows(&x) {
            Err(Error::DegenerateFeature { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_labels_and_nan() {
        assert!(FeatureSet::new(array![[1.0], [2.0]], vec![0, 3], Some(2)).is_err());
        assert!(FeatureSet::new(array![[1.0], [f64::NAN]], vec![0, 1], None).is_err());
        assert!(FeatureSet::new(array![[1.0], [2.0]], vec![0], None).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_keeps_labels(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..10.0, 4), 1..20),
            signs in prop::collection::vec(any::<bool>(), 4),
        ) {
            let n = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten()
                .enumerate()
                .map(|(i, v)| if signs[i % 4] { v } else { -v })
                .collect();
            let x = Array2::from_shape_vec((n, 4), flat).unwrap();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let fs = FeatureSet::new(x, labels, Some(3)).unwrap();
            let once = normalize_features(&fs).unwrap();
            let twice = normalize_features(&once).unwrap();
            for (a, b) in once.features().iter().zip(twice.features()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert_eq!(once.class_counts(), fs.class_counts());
            prop_assert_eq!(once.labels(), fs.labels());
        }
    }
}
