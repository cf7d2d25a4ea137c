//! Kernel ridge regression on a synthetic support set.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::data::SyntheticDataset;
use crate::error::{Error, Result};
use crate::kernels::{grad_second, gram_matrix, KernelSpec};
use crate::matrix::{axpy, KahanSum, Matrix};
use crate::models::argmax;

/// `x ↦ K(x, S) α`.
#[derive(Debug, Clone)]
pub struct KrrPredictor {
    pub spec: KernelSpec,
    pub support: Matrix,
    /// `M × outputs`.
    pub alpha: Matrix,
}

impl KrrPredictor {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_matrix(&row)?.row(0).to_vec())
    }

    pub fn predict_matrix(&self, x: &Matrix) -> Result<Matrix> {
        gram_matrix(&self.spec, x, &self.support)?.matmul(&self.alpha)
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if x.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = self.predict_matrix(x)?;
        let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(p.row(i)) == y).count();
        Ok(hits as f64 / x.rows() as f64)
    }
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        y.set(i, l, 1.0);
    }
    y
}

/// Factorization of `K + λI`, refusing numerically singular systems.
fn factor(k: &Matrix, lambda: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let mut a = k.to_nalgebra();
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let eig = SymmetricEigen::new(a.clone()).eigenvalues;
    let max = eig.iter().copied().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > f64::EPSILON * a.nrows() as f64 * max.max(1e-300)) {
        return Err(Error::LinearAlgebra(format!(
            "kernel system is singular (smallest eigenvalue {min:e})"
        )));
    }
    Cholesky::new(a).ok_or_else(|| Error::LinearAlgebra("Cholesky factorization failed".into()))
}

/// `α = (K(S,S) + λI)⁻¹ Y` for explicit targets.
pub fn krr_fit_targets(spec: &KernelSpec, support: &Matrix, targets: &Matrix, lambda: f64) -> Result<KrrPredictor> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::domain(format!("ridge must be >= 0, got {lambda}")));
    }
    if support.rows() != targets.rows() || support.is_empty() {
        return Err(Error::shape("support and targets must have the same nonzero row count"));
    }
    let chol = factor(&gram_matrix(spec, support, support)?, lambda)?;
    let alpha = chol.solve(&targets.to_nalgebra());
    Ok(KrrPredictor {
        spec: spec.clone(),
        support: support.clone(),
        alpha: Matrix::from_nalgebra(&alpha),
    })
}

/// Fit on a synthetic set with one-hot targets.
pub fn krr_fit(spec: &KernelSpec, s: &SyntheticDataset, lambda: f64) -> Result<KrrPredictor> {
    krr_fit_targets(spec, s.features(), &one_hot(s.labels(), s.class_count()), lambda)
}

/// Mean squared error (over rows and outputs) of the KRR predictor fitted on
/// `(s, ys)` when evaluated on `(t, yt)`, with gradients in the rows of `s`
/// and optionally of `t`.
pub struct KrrLoss {
    pub value: f64,
    pub grad_s: Matrix,
    pub grad_t: Option<Matrix>,
}

pub fn krr_loss_and_grad(
    spec: &KernelSpec,
    t: &Matrix,
    yt: &Matrix,
    s: &Matrix,
    ys: &Matrix,
    lambda: f64,
    want_t: bool,
) -> Result<KrrLoss> {
    let (n, m, c) = (t.rows(), s.rows(), yt.cols());
    if yt.rows() != n || ys.rows() != m || ys.cols() != c {
        return Err(Error::shape("target shapes do not match the point sets"));
    }
    let kss = gram_matrix(spec, s, s)?;
    let kts = gram_matrix(spec, t, s)?;
    let chol = factor(&kss, lambda)?;
    let alpha = chol.solve(&ys.to_nalgebra());
    let kts_n = kts.to_nalgebra();
    let pred = &kts_n * &alpha;
    let resid = pred - yt.to_nalgebra();
    let scale = 1.0 / (n * c) as f64;
    let mut acc = KahanSum::default();
    for v in resid.iter() {
        acc.add(v * v);
    }
    let value = acc.total() * scale;
    let g: DMatrix<f64> = resid * (2.0 * scale);
    // dL/dK_TS = G αᵀ, dL/dK_SS = −B αᵀ with B = (K_SS+λI)⁻¹ K_TSᵀ G
    let d_kts = &g * alpha.transpose();
    let b = chol.solve(&(kts_n.transpose() * &g));
    let d_kss = -(&b * alpha.transpose());

    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let sj = s.row(j);
            let mut out = vec![0.0; s.cols()];
            for i in 0..n {
                axpy(&mut out, d_kts[(i, j)], &grad_second(spec, t.row(i), sj)?);
            }
            for l in 0..m {
                axpy(&mut out, d_kss[(l, j)] + d_kss[(j, l)], &grad_second(spec, s.row(l), sj)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let grad_s = Matrix::from_rows(&rows)?;
    let grad_t = if want_t {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let ti = t.row(i);
                let mut out = vec![0.0; t.cols()];
                for j in 0..m {
                    axpy(&mut out, d_kts[(i, j)], &grad_second(spec, s.row(j), ti)?);
                }
                // the targets do not move with t
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Some(Matrix::from_rows(&rows)?)
    } else {
        None
    };
    Ok(KrrLoss { value, grad_s, grad_t })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_linear_example() {
        let p = krr_fit_targets(&KernelSpec::Linear, &Matrix::column(&[2.0]), &Matrix::column(&[1.0]), 1.0).unwrap();
        assert!((p.alpha.get(0, 0) - 0.2).abs() < 1e-15);
        assert!((p.predict(&[3.0]).unwrap()[0] - 1.2).abs() < 1e-14);
    }

    #[test]
    fn huge_ridge_shrinks_to_zero() {
        let s = Matrix::column(&[0.2, 0.7]);
        let p = krr_fit_targets(&KernelSpec::gaussian(1.0).unwrap(), &s, &Matrix::column(&[1.0, -1.0]), 1e9).unwrap();
        assert!(p.alpha.frobenius_norm() < 1e-8);
    }

    #[test]
    fn singular_system_is_reported() {
        let s = Matrix::column(&[0.5, 0.5]);
        let r = krr_fit_targets(&KernelSpec::Linear, &s, &Matrix::column(&[1.0, 0.0]), 0.0);
        assert!(matches!(r, Err(Error::LinearAlgebra(_))));
    }

    #[test]
    fn interpolates_at_tiny_ridge() {
        let s = Matrix::from_rows(&[[0.1, 0.2], [0.8, 0.3], [0.4, 0.9]]).unwrap();
        let y = Matrix::column(&[1.0, -0.5, 2.0]);
        let p = krr_fit_targets(&KernelSpec::gaussian(2.0).unwrap(), &s, &y, 1e-8).unwrap();
        let out = p.predict_matrix(&s).unwrap();
        for i in 0..3 {
            assert!((out.get(i, 0) - y.get(i, 0)).abs() < 1e-4);
        }
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let spec = KernelSpec::gaussian(3.0).unwrap();
        let t = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.9], [0.7, 0.4], [0.9, 0.8]]).unwrap();
        let yt = one_hot(&[0, 1, 0, 1], 2);
        let s = Matrix::from_rows(&[[0.2, 0.3], [0.6, 0.7]]).unwrap();
        let ys = one_hot(&[0, 1], 2);
        let l = krr_loss_and_grad(&spec, &t, &yt, &s, &ys, 1e-2, true).unwrap();
        let h = 1e-6;
        for (j, k) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let mut sp = s.clone();
            sp.set(j, k, s.get(j, k) + h);
            let up = krr_loss_and_grad(&spec, &t, &yt, &sp, &ys, 1e-2, false).unwrap().value;
            sp.set(j, k, s.get(j, k) - h);
            let dn = krr_loss_and_grad(&spec, &t, &yt, &sp, &ys, 1e-2, false).unwrap().value;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - l.grad_s.get(j, k)).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", l.grad_s.get(j, k));
        }
        let gt = l.grad_t.unwrap();
        let mut tp = t.clone();
        tp.set(2, 1, t.get(2, 1) + h);
        let up = krr_loss_and_grad(&spec, &tp, &yt, &s, &ys, 1e-2, false).unwrap().value;
        tp.set(2, 1, t.get(2, 1) - h);
        let dn = krr_loss_and_grad(&spec, &tp, &yt, &s, &ys, 1e-2, false).unwrap().value;
        assert!(((up - dn) / (2.0 * h) - gt.get(2, 1)).abs() < 1e-6);
    }
}
