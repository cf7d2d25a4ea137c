//! Labeled datasets, synthetic condensates, CSV persistence and toy generators.
//!
//! The on-disk format is a CSV with header `f0,…,f{n-1},label` and one row per
//! sample. Labels are dense integers `0..C`. Synthetic datasets use the same
//! CSV layout plus a JSON sidecar (`<stem>.meta.json`) carrying provenance.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed;

/// Per-feature min-max scaling parameters, kept so scaling can be inverted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaling {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }

    /// Maps scaled values back to the original units. Constant features
    /// come back as their constant value.
    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(&v, (&lo, &hi))| lo + v * (hi - lo))
            .collect()
    }
}

/// Feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    #[serde(default)]
    scaling: Option<MinMaxScaling>,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain NaN or Inf".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Label(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            labels,
            class_count,
            scaling: None,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn scaling(&self) -> Option<&MinMaxScaling> {
        self.scaling.as_ref()
    }

    pub fn with_scaling(mut self, scaling: Option<MinMaxScaling>) -> Self {
        self.scaling = scaling;
        self
    }

    /// Subset of rows (labels follow).
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            scaling: self.scaling.clone(),
        }
    }

    /// Rows belonging to class `y`.
    pub fn class_rows(&self, y: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == y).collect();
        self.features.select_rows(&idx)
    }

    /// Same labels, new features of identical shape.
    pub fn with_features(&self, features: Matrix) -> Result<LabeledDataset> {
        if features.rows() != self.len() {
            return Err(Error::shape("feature row count changed"));
        }
        let mut out = LabeledDataset::new(features, self.labels.clone(), self.class_count)?;
        out.scaling = self.scaling.clone();
        Ok(out)
    }
}

/// Per-class index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    classes: Vec<Vec<usize>>,
}

impl ClassPartition {
    pub fn class(&self, y: usize) -> &[usize] {
        &self.classes[y]
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.classes.iter().enumerate().map(|(y, v)| (y, v.as_slice()))
    }

    pub fn smallest_class(&self) -> usize {
        self.classes.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Groups row indices by label; every class must be non-empty.
pub fn per_class_partition(d: &LabeledDataset) -> Result<ClassPartition> {
    let mut classes = vec![Vec::new(); d.class_count()];
    for (i, &y) in d.labels().iter().enumerate() {
        classes[y].push(i);
    }
    if let Some(y) = classes.iter().position(Vec::is_empty) {
        return Err(Error::EmptyClass(y));
    }
    Ok(ClassPartition { classes })
}

/// Per-feature min-max scaling into [0,1]; constant features map to 0.
pub fn normalize_features(d: &LabeledDataset) -> Result<LabeledDataset> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !d.features().is_finite() {
        return Err(Error::Validation("features contain NaN or Inf".into()));
    }
    let n = d.dim();
    let mut min = vec![f64::INFINITY; n];
    let mut max = vec![f64::NEG_INFINITY; n];
    for r in d.features().iter_rows() {
        for j in 0..n {
            min[j] = min[j].min(r[j]);
            max[j] = max[j].max(r[j]);
        }
    }
    let scaling = MinMaxScaling { min, max };
    let mut out = Matrix::zeros(d.len(), n);
    for i in 0..d.len() {
        out.row_mut(i).copy_from_slice(&scaling.apply(d.features().row(i)));
    }
    Ok(d.with_features(out)?.with_scaling(Some(scaling)))
}

/// Reads a labeled CSV dataset.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let width = header.len();
    if width < 2 || header.get(width - 1).map(str::trim) != Some("label") {
        return Err(Error::Parse {
            row: 0,
            message: "header must be f0,...,f{n-1},label".into(),
        });
    }
    let n = width - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        for j in 0..n {
            let v: f64 = rec[j].trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("field {j} ({:?}) is not a number", &rec[j]),
            })?;
            if !v.is_finite() {
                return Err(Error::Validation(format!("non-finite value at row {row}")));
            }
            data.push(v);
        }
        let label: usize = rec[n].trim().parse().map_err(|_| Error::Parse {
            row,
            message: format!("label {:?} is not a non-negative integer", &rec[n]),
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let present: BTreeSet<usize> = labels.iter().copied().collect();
    let class_count = present.len();
    if present.iter().copied().ne(0..class_count) {
        return Err(Error::Label(format!(
            "labels must be contiguous from 0, found {present:?}"
        )));
    }
    LabeledDataset::new(Matrix::from_vec(labels.len(), n, data)?, labels, class_count)
}

fn write_csv(path: &Path, features: &Matrix, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..features.cols()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    let mut rec = Vec::with_capacity(features.cols() + 1);
    for (row, &y) in features.iter_rows().zip(labels) {
        rec.clear();
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `d` as CSV. Values use shortest round-trip formatting.
pub fn save_dataset(d: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(path.as_ref(), d.features(), d.labels())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Subsample,
    GaussianNoise,
}

/// Learnable per-class point set with hard labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
    per_class: usize,
    pub origin: String,
    pub seed: Option<u64>,
    pub scaling: Option<MinMaxScaling>,
}

/// JSON sidecar describing a saved synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    pub origin: String,
    pub seed: Option<u64>,
    pub per_class_size: usize,
    pub class_count: usize,
    pub normalization: Option<MinMaxScaling>,
}

impl SyntheticDataset {
    /// `features` rows must be grouped `per_class` at a time per class, in
    /// class order, or at least carry exactly `per_class` rows of each label.
    pub fn new(
        features: Matrix,
        labels: Vec<usize>,
        class_count: usize,
        per_class: usize,
        origin: impl Into<String>,
    ) -> Result<Self> {
        if per_class == 0 {
            return Err(Error::config("per_class must be at least 1"));
        }
        if features.rows() != labels.len() || labels.len() != per_class * class_count {
            return Err(Error::shape(format!(
                "{} rows / {} labels do not equal per_class ({per_class}) x classes ({class_count})",
                features.rows(),
                labels.len()
            )));
        }
        let mut counts = vec![0usize; class_count];
        for &y in &labels {
            if y >= class_count {
                return Err(Error::Label(format!("label {y} out of range")));
            }
            counts[y] += 1;
        }
        if counts.iter().any(|&c| c != per_class) {
            return Err(Error::Label(format!(
                "each class needs exactly {per_class} rows, got {counts:?}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Validation("features contain NaN or Inf".into()));
        }
        Ok(SyntheticDataset {
            features,
            labels,
            class_count,
            per_class,
            origin: origin.into(),
            seed: None,
            scaling: None,
        })
    }

    /// Treats a labeled dataset with balanced classes as a condensate.
    pub fn from_labeled(d: &LabeledDataset, origin: impl Into<String>) -> Result<Self> {
        let part = per_class_partition(d)?;
        let k = part.class(0).len();
        if part.iter().any(|(_, v)| v.len() != k) {
            return Err(Error::Label("classes are not balanced".into()));
        }
        let mut s = SyntheticDataset::new(
            d.features().clone(),
            d.labels().to_vec(),
            d.class_count(),
            k,
            origin,
        )?;
        s.scaling = d.scaling().cloned();
        Ok(s)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_rows(&self, y: usize) -> Matrix {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == y).collect();
        self.features.select_rows(&idx)
    }

    /// Replaces the features, keeping labels and provenance.
    pub fn with_features(&self, features: Matrix) -> Result<SyntheticDataset> {
        let mut s = SyntheticDataset::new(
            features,
            self.labels.clone(),
            self.class_count,
            self.per_class,
            self.origin.clone(),
        )?;
        s.seed = self.seed;
        s.scaling = self.scaling.clone();
        Ok(s)
    }

    pub fn to_labeled(&self) -> LabeledDataset {
        LabeledDataset {
            features: self.features.clone(),
            labels: self.labels.clone(),
            class_count: self.class_count,
            scaling: self.scaling.clone(),
        }
    }

    pub fn meta(&self) -> SyntheticMeta {
        SyntheticMeta {
            origin: self.origin.clone(),
            seed: self.seed,
            per_class_size: self.per_class,
            class_count: self.class_count,
            normalization: self.scaling.clone(),
        }
    }
}

/// Path of the metadata sidecar belonging to a synthetic CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

pub fn save_synthetic(s: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_csv(path, s.features(), s.labels())?;
    let meta = serde_json::to_string_pretty(&s.meta())?;
    std::fs::write(sidecar_path(path), meta + "\n")?;
    Ok(())
}

/// Loads a synthetic CSV; the sidecar is optional (origin becomes "csv").
pub fn load_synthetic(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let path = path.as_ref();
    let d = load_dataset(path)?;
    let side = sidecar_path(path);
    let mut s = SyntheticDataset::from_labeled(&d, "csv")?;
    if side.exists() {
        let meta: SyntheticMeta = serde_json::from_str(&std::fs::read_to_string(side)?)?;
        if meta.per_class_size != s.per_class || meta.class_count != s.class_count {
            return Err(Error::Validation("sidecar does not match CSV contents".into()));
        }
        s.origin = meta.origin;
        s.seed = meta.seed;
        s.scaling = meta.normalization;
    }
    Ok(s)
}

/// Initial synthetic set drawn from `d`, `per_class` rows per class.
pub fn init_synthetic(
    d: &LabeledDataset,
    per_class: usize,
    mode: InitMode,
    seed: u64,
) -> Result<SyntheticDataset> {
    if per_class == 0 {
        return Err(Error::config("per_class must be at least 1"));
    }
    let part = per_class_partition(d)?;
    let c = d.class_count();
    if per_class * c > d.len() {
        return Err(Error::Capacity {
            requested: per_class * c,
            available: d.len(),
        });
    }
    let mut rng = seed::rng(seed);
    let mut features = Matrix::zeros(per_class * c, d.dim());
    let mut labels = Vec::with_capacity(per_class * c);
    for (y, idx) in part.iter() {
        match mode {
            InitMode::Subsample => {
                if per_class > idx.len() {
                    return Err(Error::Capacity {
                        requested: per_class,
                        available: idx.len(),
                    });
                }
                for pick in sample(&mut rng, idx.len(), per_class).into_iter() {
                    let row = labels.len();
                    features
                        .row_mut(row)
                        .copy_from_slice(d.features().row(idx[pick]));
                    labels.push(y);
                }
            }
            InitMode::GaussianNoise => {
                let mean = d.features().select_rows(idx).mean_row();
                let noise = Normal::new(0.0, 0.1).expect("valid normal");
                for _ in 0..per_class {
                    let row = labels.len();
                    for (j, m) in mean.iter().enumerate() {
                        let v: f64 = m + noise.sample(&mut rng);
                        features.set(row, j, v.clamp(0.0, 1.0));
                    }
                    labels.push(y);
                }
            }
        }
    }
    let mut s = SyntheticDataset::new(features, labels, c, per_class, match mode {
        InitMode::Subsample => "init:subsample",
        InitMode::GaussianNoise => "init:gaussian_noise",
    })?;
    s.seed = Some(seed);
    s.scaling = d.scaling().cloned();
    Ok(s)
}

/// Deterministic shuffled train/held-out split (`train_fraction` of each class
/// goes to the first part).
pub fn stratified_split(
    d: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    use rand::seq::SliceRandom;
    let part = per_class_partition(d)?;
    let mut rng = seed::rng(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (_, idx) in part.iter() {
        let mut idx = idx.to_vec();
        idx.shuffle(&mut rng);
        let k = ((idx.len() as f64) * train_fraction).round() as usize;
        let k = k.clamp(1, idx.len().saturating_sub(1).max(1));
        train.extend_from_slice(&idx[..k]);
        held.extend_from_slice(&idx[k..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    if held.is_empty() {
        return Err(Error::Capacity {
            requested: 2,
            available: d.len(),
        });
    }
    Ok((d.subset(&train), d.subset(&held)))
}

/// Two isotropic Gaussian blobs in `dim` dimensions, `n` samples in total
/// (alternating labels), unit standard deviation, class means `separation`
/// apart along the first axis.
pub fn two_gaussian_blobs(n: usize, dim: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if n < 2 || dim == 0 {
        return Err(Error::config("need at least two samples and one dimension"));
    }
    let mut rng = seed::rng(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut features = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        for j in 0..dim {
            let centre = if j == 0 {
                (y as f64 - 0.5) * separation
            } else {
                0.0
            };
            features.set(i, j, centre + normal.sample(&mut rng));
        }
        labels.push(y);
    }
    LabeledDataset::new(features, labels, 2)
}

/// Small single-channel toy images (`side`×`side`): class 0 is a bright
/// horizontal bar, class 1 a bright vertical bar, each with uniform noise.
/// Rows are flattened row-major images.
pub fn toy_bar_images(per_class: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if side < 2 || per_class == 0 {
        return Err(Error::config("need side >= 2 and per_class >= 1"));
    }
    let mut rng = seed::rng(seed);
    let mut features = Matrix::zeros(2 * per_class, side * side);
    let mut labels = Vec::new();
    for i in 0..2 * per_class {
        let y = i % 2;
        let line = rng.random_range(0..side);
        for r in 0..side {
            for c in 0..side {
                let on = if y == 0 { r == line } else { c == line };
                let base = if on { 0.8 } else { 0.1 };
                let v: f64 = base + rng.random_range(-0.1..0.1);
                features.set(i, r * side + c, v.clamp(0.0, 1.0));
            }
        }
        labels.push(y);
    }
    LabeledDataset::new(features, labels, 2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_csv() {
        let f = write_tmp("f0,f1,label\n0.1,0.2,0\n0.3,0.4,1\n0.5,0.6,0\n");
        let d = load_dataset(f.path()).unwrap();
        assert_eq!((d.len(), d.dim(), d.class_count()), (3, 2, 2));
        assert_eq!(d.features().row(1), &[0.3, 0.4]);
    }

    #[test]
    fn header_only_is_empty() {
        let f = write_tmp("f0,f1,label\n");
        assert!(matches!(load_dataset(f.path()), Err(Error::EmptyDataset)));
    }

    #[test]
    fn non_contiguous_labels_rejected() {
        let f = write_tmp("f0,label\n0.1,0\n0.2,2\n");
        assert!(matches!(load_dataset(f.path()), Err(Error::Label(_))));
    }

    #[test]
    fn malformed_row_reports_index() {
        let f = write_tmp("f0,label\n0.1,0\nabc,1\n");
        match load_dataset(f.path()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn min_max_examples() {
        let m = Matrix::from_rows(&[[2.0, 5.0, 0.0], [4.0, 5.0, 1.0], [6.0, 5.0, 1.0]]).unwrap();
        let d = LabeledDataset::new(m, vec![0, 1, 0], 2).unwrap();
        let n = normalize_features(&d).unwrap();
        let col = |j: usize| -> Vec<f64> { (0..3).map(|i| n.features().get(i, j)).collect() };
        assert_eq!(col(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(col(1), vec![0.0, 0.0, 0.0]);
        assert_eq!(col(2), vec![0.0, 1.0, 1.0]);
        let s = n.scaling().unwrap();
        assert_eq!(s.invert(n.features().row(2)), vec![6.0, 5.0, 1.0]);
    }

    #[test]
    fn partition_examples() {
        let d = LabeledDataset::new(Matrix::column(&[0.0, 1.0, 2.0]), vec![0, 1, 0], 2).unwrap();
        let p = per_class_partition(&d).unwrap();
        assert_eq!(p.class(0), &[0, 2]);
        assert_eq!(p.class(1), &[1]);

        let one = LabeledDataset::new(Matrix::column(&[0.0, 1.0]), vec![0, 0], 1).unwrap();
        assert_eq!(per_class_partition(&one).unwrap().class(0), &[0, 1]);

        let missing = LabeledDataset::new(Matrix::column(&[0.0, 1.0]), vec![0, 0], 2).unwrap();
        assert!(matches!(per_class_partition(&missing), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn init_subsample_and_capacity() {
        let d = two_gaussian_blobs(20, 2, 6.0, 1).unwrap();
        let s = init_synthetic(&d, 1, InitMode::Subsample, 3).unwrap();
        assert_eq!(s.len(), 2);
        for i in 0..s.len() {
            let row = s.features().row(i);
            assert!((0..d.len()).any(|k| d.features().row(k) == row && d.labels()[k] == s.labels()[i]));
        }
        assert_eq!(s, init_synthetic(&d, 1, InitMode::Subsample, 3).unwrap());

        let small = LabeledDataset::new(Matrix::column(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]), vec![0, 0, 0, 1, 1, 1], 2).unwrap();
        assert!(matches!(
            init_synthetic(&small, 5, InitMode::Subsample, 0),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn gaussian_noise_init_is_clipped() {
        let d = normalize_features(&two_gaussian_blobs(40, 3, 6.0, 2).unwrap()).unwrap();
        let s = init_synthetic(&d, 3, InitMode::GaussianNoise, 9).unwrap();
        assert!(s.features().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthetic_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let d = normalize_features(&two_gaussian_blobs(30, 2, 4.0, 5).unwrap()).unwrap();
        let s = init_synthetic(&d, 2, InitMode::GaussianNoise, 11).unwrap();
        let p = dir.path().join("s.csv");
        save_synthetic(&s, &p).unwrap();
        let back = load_synthetic(&p).unwrap();
        assert_eq!(back.labels(), s.labels());
        assert!(back.features().max_abs_diff(s.features()) <= 1e-12);
        assert_eq!(back.meta(), s.meta());
    }
}
