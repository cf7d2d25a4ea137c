//! Linear (PCA) encoder/decoder pair and objectives evaluated in input or
//! latent space.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::discrepancy::{ipm_feature_stat, wasserstein1, ModelBatch};
use crate::error::{Error, Result};
use crate::kernels::{mmd_squared, KernelSpec};
use crate::matrix::{dot, KahanSum, Matrix};

/// `encode(x) = Wᵀ(x − mean)`, `decode(z) = W z + mean`, with `W` holding
/// orthonormal columns. Serialized as the mean plus the list of columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearAutoencoder {
    mean: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl LinearAutoencoder {
    /// `m = n`, `W = I`, zero mean.
    pub fn identity(n: usize) -> Self {
        let columns = (0..n)
            .map(|j| {
                let mut c = vec![0.0; n];
                c[j] = 1.0;
                c
            })
            .collect();
        LinearAutoencoder {
            mean: vec![0.0; n],
            columns,
        }
    }

    /// Builds from explicit parts, checking `WᵀW = I` to 1e-10.
    pub fn from_parts(mean: Vec<f64>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = mean.len();
        if columns.is_empty() || columns.len() > n {
            return Err(Error::config(format!(
                "latent dimension {} invalid for input dimension {n}",
                columns.len()
            )));
        }
        for (a, ca) in columns.iter().enumerate() {
            if ca.len() != n {
                return Err(Error::shape("basis column length differs from mean length"));
            }
            for (b, cb) in columns.iter().enumerate() {
                let target = if a == b { 1.0 } else { 0.0 };
                if (dot(ca, cb) - target).abs() > 1e-10 {
                    return Err(Error::Validation("basis columns are not orthonormal".into()));
                }
            }
        }
        Ok(LinearAutoencoder { mean, columns })
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Basis as an `n × m` matrix.
    pub fn basis(&self) -> Matrix {
        let (n, m) = (self.input_dim(), self.latent_dim());
        let mut w = Matrix::zeros(n, m);
        for (j, c) in self.columns.iter().enumerate() {
            for i in 0..n {
                w.set(i, j, c[i]);
            }
        }
        w
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "encoder expects {} coordinates, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.columns.iter().map(|c| dot(c, &centered)).collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::shape(format!(
                "decoder expects {} coordinates, got {}",
                self.latent_dim(),
                z.len()
            )));
        }
        let mut out = self.mean.clone();
        for (c, &zj) in self.columns.iter().zip(z) {
            for (o, &ci) in out.iter_mut().zip(c) {
                *o += ci * zj;
            }
        }
        Ok(out)
    }

    /// `Wᵀ g`: pulls an input-space cotangent back to latent space (the
    /// transpose Jacobian of `decode`).
    pub fn decode_vjp(&self, g: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, g)).collect()
    }

    /// `W g`: pulls a latent cotangent back to input space (the transpose
    /// Jacobian of `encode`).
    pub fn encode_vjp(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        for (c, &gj) in self.columns.iter().zip(g) {
            for (o, &ci) in out.iter_mut().zip(c) {
                *o += ci * gj;
            }
        }
        out
    }

    /// Mean squared reconstruction error over the rows of `x`.
    pub fn reconstruction_error(&self, x: &Matrix) -> Result<f64> {
        let mut acc = KahanSum::default();
        for r in x.iter_rows() {
            let back = self.decode(&self.encode(r)?)?;
            acc.add(crate::matrix::sq_dist(r, &back));
        }
        Ok(acc.total() / x.rows().max(1) as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw: LinearAutoencoder = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        LinearAutoencoder::from_parts(raw.mean, raw.columns)
    }
}

/// Top-`m` principal directions of the centered features. Each column is
/// sign-fixed so that its largest-magnitude entry is positive.
pub fn fit_linear_autoencoder(t: &LabeledDataset, m: usize) -> Result<LinearAutoencoder> {
    let n = t.dim();
    if m == 0 || m >= n {
        return Err(Error::config(format!(
            "latent dimension must satisfy 1 <= m < n (m={m}, n={n})"
        )));
    }
    if t.len() < 2 {
        return Err(Error::Validation("at least two rows are needed to fit".into()));
    }
    let x = t.features();
    let mean = x.mean_row();
    let mut cov = nalgebra::DMatrix::<f64>::zeros(n, n);
    for r in x.iter_rows() {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, b)| a - b).collect();
        for i in 0..n {
            for j in i..n {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    let inv = 1.0 / x.rows() as f64;
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] * inv;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut columns = Vec::with_capacity(m);
    for &k in order.iter().take(m) {
        let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        let nrm = crate::matrix::norm(&c);
        c.iter_mut().for_each(|v| *v /= nrm);
        let mut lead = 0;
        for i in 1..n {
            if c[i].abs() > c[lead].abs() {
                lead = i;
            }
        }
        if c[lead] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        columns.push(c);
    }
    Ok(LinearAutoencoder { mean, columns })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Encode,
    Decode,
}

/// Applies the encoder or decoder row by row.
pub fn push_forward_dataset(ae: &LinearAutoencoder, d: &Matrix, direction: Direction) -> Result<Matrix> {
    let out_dim = match direction {
        Direction::Encode => ae.latent_dim(),
        Direction::Decode => ae.input_dim(),
    };
    let mut out = Matrix::zeros(d.rows(), out_dim);
    for (i, r) in d.iter_rows().enumerate() {
        let v = match direction {
            Direction::Encode => ae.encode(r)?,
            Direction::Decode => ae.decode(r)?,
        };
        out.row_mut(i).copy_from_slice(&v);
    }
    Ok(out)
}

/// Which space the optimized points live in, and which space matching
/// happens in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `D(T, S)`.
    #[default]
    InputInput,
    /// `D(T, g_d(Z))`.
    InputLatent,
    /// `D(g_e(T), g_e(S))`.
    LatentInput,
    /// `D(g_e(T), Z)`.
    LatentLatent,
}

impl Regime {
    /// The optimized variable lives in latent space.
    pub fn optimizes_latent(self) -> bool {
        matches!(self, Regime::InputLatent | Regime::LatentLatent)
    }

    /// Matching is performed in latent space.
    pub fn matches_latent(self) -> bool {
        matches!(self, Regime::LatentInput | Regime::LatentLatent)
    }

    pub fn all() -> [Regime; 4] {
        [
            Regime::InputInput,
            Regime::InputLatent,
            Regime::LatentInput,
            Regime::LatentLatent,
        ]
    }
}

#[derive(Debug, Clone)]
pub enum RegimeDiscrepancy {
    Mmd(KernelSpec),
    W1,
    /// Per-class feature-mean statistic of the given model batch, which must
    /// accept points of the matching space.
    IpmFeature(ModelBatch),
}

/// Matching-space views of the real set and the optimized variable.
pub fn regime_views(
    regime: Regime,
    ae: &LinearAutoencoder,
    t: &LabeledDataset,
    var: &LabeledDataset,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let expected = if regime.optimizes_latent() {
        ae.latent_dim()
    } else {
        ae.input_dim()
    };
    if var.dim() != expected {
        return Err(Error::config(format!(
            "{regime:?} optimizes {expected}-dimensional points, got {}",
            var.dim()
        )));
    }
    if t.dim() != ae.input_dim() {
        return Err(Error::shape("real data dimension differs from the encoder input"));
    }
    let enc = |m: &Matrix| push_forward_dataset(ae, m, Direction::Encode);
    let (tm, vm) = match regime {
        Regime::InputInput => (t.features().clone(), var.features().clone()),
        Regime::InputLatent => (
            t.features().clone(),
            push_forward_dataset(ae, var.features(), Direction::Decode)?,
        ),
        Regime::LatentInput => (enc(t.features())?, enc(var.features())?),
        Regime::LatentLatent => (enc(t.features())?, var.features().clone()),
    };
    Ok((t.with_features(tm)?, var.with_features(vm)?))
}

/// Regime quadrant objective, summed over classes.
pub fn regime_objective(
    regime: Regime,
    ae: &LinearAutoencoder,
    t: &LabeledDataset,
    var: &LabeledDataset,
    disc: &RegimeDiscrepancy,
) -> Result<f64> {
    if t.class_count() != var.class_count() {
        return Err(Error::Label("class counts differ".into()));
    }
    let (tv, sv) = regime_views(regime, ae, t, var)?;
    match disc {
        RegimeDiscrepancy::IpmFeature(batch) => ipm_feature_stat(batch, &tv, &sv, false),
        RegimeDiscrepancy::Mmd(_) | RegimeDiscrepancy::W1 => {
            let mut acc = KahanSum::default();
            for y in 0..t.class_count() {
                let a = tv.class_rows(y);
                let b = sv.class_rows(y);
                acc.add(match disc {
                    RegimeDiscrepancy::Mmd(k) => mmd_squared(k, &a, &b)?,
                    _ => wasserstein1(&a, &b)?,
                });
            }
            Ok(acc.total())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_data() -> LabeledDataset {
        let rows: Vec<[f64; 2]> = (0..10).map(|i| [i as f64 * 0.1, i as f64 * 0.05 + 0.2]).collect();
        LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), vec![0; 10], 1).unwrap()
    }

    #[test]
    fn line_is_reconstructed_exactly() {
        let ae = fit_linear_autoencoder(&line_data(), 1).unwrap();
        assert!(ae.reconstruction_error(line_data().features()).unwrap() <= 1e-10);
        assert!(matches!(fit_linear_autoencoder(&line_data(), 2), Err(Error::Config(_))));
    }

    #[test]
    fn dropping_one_direction_loses_smallest_eigenvalue() {
        let rows = [[0.1, 0.9, 0.3], [0.5, 0.2, 0.8], [0.7, 0.4, 0.1], [0.2, 0.3, 0.6], [0.9, 0.8, 0.5]];
        let d = LabeledDataset::new(Matrix::from_rows(&rows).unwrap(), vec![0; 5], 1).unwrap();
        let ae = fit_linear_autoencoder(&d, 2).unwrap();
        // oracle: smallest eigenvalue of the 1/N covariance
        let x = d.features();
        let mean = x.mean_row();
        let mut cov = nalgebra::DMatrix::<f64>::zeros(3, 3);
        for r in x.iter_rows() {
            let c = nalgebra::DVector::from_iterator(3, r.iter().zip(&mean).map(|(a, b)| a - b));
            cov += &c * c.transpose();
        }
        cov /= 5.0;
        let lmin = nalgebra::SymmetricEigen::new(cov).eigenvalues.min();
        assert!((ae.reconstruction_error(x).unwrap() - lmin).abs() <= 1e-12);
    }

    #[test]
    fn permuted_rows_give_identical_basis() {
        let d = line_data();
        let rev: Vec<usize> = (0..d.len()).rev().collect();
        let a = fit_linear_autoencoder(&d, 1).unwrap();
        let b = fit_linear_autoencoder(&d.subset(&rev), 1).unwrap();
        for (ca, cb) in a.columns().iter().zip(b.columns()) {
            for (x, y) in ca.iter().zip(cb) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn serialization_keeps_orthonormality() {
        let ae = fit_linear_autoencoder(&line_data(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ae.json");
        ae.save(&p).unwrap();
        let back = LinearAutoencoder::load(&p).unwrap();
        assert!((dot(&back.columns()[0], &back.columns()[0]) - 1.0).abs() <= 1e-10);
    }
}
