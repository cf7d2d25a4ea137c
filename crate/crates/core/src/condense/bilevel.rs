//! Bilevel objectives: unrolled inner training, trajectory matching and the
//! implicit gradient of a ridge-regression inner problem.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dist, Matrix};
use crate::models::{adversarial_loss, lambda_max_estimate, Loss, Mlp, PgdConfig};

/// Central differences of `f` at `x`, one coordinate per task.
pub fn central_difference<F>(x: &[f64], h: f64, f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut p = x.to_vec();
            p[i] = x[i] + h;
            let up = f(&p)?;
            p[i] = x[i] - h;
            let dn = f(&p)?;
            Ok((up - dn) / (2.0 * h))
        })
        .collect()
}

/// Parameters visited by `steps` full-batch gradient steps of size `eta` on
/// `(x, labels)`, the starting point included.
pub fn gd_path(model: &Mlp, x: &Matrix, labels: &[usize], eta: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
    let mut path = Vec::with_capacity(steps + 1);
    let mut cur = model.clone();
    path.push(cur.params().to_vec());
    for epoch in 1..=steps {
        let g = cur.mean_param_grad(x, labels, Loss::CrossEntropy)?;
        let next: Vec<f64> = cur.params().iter().zip(&g).map(|(p, g)| p - eta * g).collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
        cur = cur.with_params(next)?;
        path.push(cur.params().to_vec());
    }
    Ok(path)
}

/// Model after `steps` full-batch gradient steps.
pub fn unroll(model: &Mlp, x: &Matrix, labels: &[usize], eta: f64, steps: usize) -> Result<Mlp> {
    let path = gd_path(model, x, labels, eta, steps)?;
    model.with_params(path.into_iter().last().unwrap())
}

/// `Σ_{t≥1} ‖θ_t − θ*_t‖₂` over the common length of two paths.
pub fn trajectory_mismatch(student: &[Vec<f64>], expert: &[Vec<f64>]) -> f64 {
    student
        .iter()
        .zip(expert)
        .skip(1)
        .map(|(a, b)| dist(a, b))
        .sum()
}

/// Loss that judges the unrolled model on the real set.
#[derive(Debug, Clone)]
pub enum OuterLoss {
    Clean,
    Adversarial(PgdConfig),
    /// Clean loss plus `weight · λ_max` of the real-set Hessian, estimated on
    /// `x` with a fixed probe seed.
    Curvature {
        weight: f64,
        x: Matrix,
        labels: Vec<usize>,
        iters: usize,
        seed: u64,
    },
}

impl OuterLoss {
    /// `(total, penalty part)`.
    pub fn eval(&self, model: &Mlp, t: &Matrix, tl: &[usize]) -> Result<(f64, f64)> {
        match self {
            OuterLoss::Clean => Ok((model.loss(t, tl, Loss::CrossEntropy)?, 0.0)),
            OuterLoss::Adversarial(cfg) => Ok((adversarial_loss(model, t, tl, cfg)?, 0.0)),
            OuterLoss::Curvature {
                weight,
                x,
                labels,
                iters,
                seed,
            } => {
                let l = model.loss(t, tl, Loss::CrossEntropy)?;
                let pen = weight * lambda_max_estimate(model, x, labels, Loss::CrossEntropy, *iters, *seed)?;
                Ok((l + pen, pen))
            }
        }
    }
}

/// Outer loss after unrolling `steps` inner steps on `s` from `start`.
pub fn unrolled_outer(
    start: &Mlp,
    s: &Matrix,
    sl: &[usize],
    t: &Matrix,
    tl: &[usize],
    eta: f64,
    steps: usize,
    outer: &OuterLoss,
) -> Result<(f64, f64)> {
    let m = unroll(start, s, sl, eta, steps)?;
    outer.eval(&m, t, tl)
}

/// Finite-difference outer gradient of the unrolled objective with respect to
/// every synthetic coordinate and the inner step size.
pub fn bptt_outer_gradient(
    start: &Mlp,
    s: &Matrix,
    sl: &[usize],
    t: &Matrix,
    tl: &[usize],
    eta: f64,
    steps: usize,
    h: f64,
) -> Result<(f64, Matrix, f64)> {
    let outer = OuterLoss::Clean;
    let mut x = s.as_slice().to_vec();
    x.push(eta);
    let f = |v: &[f64]| -> Result<f64> {
        let sm = Matrix::from_vec(s.rows(), s.cols(), v[..v.len() - 1].to_vec())?;
        Ok(unrolled_outer(start, &sm, sl, t, tl, v[v.len() - 1], steps, &outer)?.0)
    };
    let value = f(&x)?;
    let mut g = central_difference(&x, h, f)?;
    let ge = g.pop().unwrap();
    Ok((value, Matrix::from_vec(s.rows(), s.cols(), g)?, ge))
}

fn with_intercept(x: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(x.rows(), x.cols() + 1, |i, j| if j < x.cols() { x.get(i, j) } else { 1.0 })
}

/// Outer loss `(1/2N)‖X_T W − Y_T‖²` of the ridge solution
/// `W = (X̃ᵀX̃ + λI)⁻¹X̃ᵀỸ` (intercept column appended) and its gradient in
/// the synthetic features via the implicit function theorem.
pub fn cig_ridge(t: &Matrix, yt: &Matrix, s: &Matrix, ys: &Matrix, lambda: f64) -> Result<(f64, Matrix)> {
    if t.cols() != s.cols() || yt.cols() != ys.cols() || t.rows() != yt.rows() || s.rows() != ys.rows() {
        return Err(Error::shape("inconsistent ridge problem shapes"));
    }
    if t.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs = with_intercept(s);
    let xt = with_intercept(t);
    let (ys, yt) = (ys.to_nalgebra(), yt.to_nalgebra());
    let d = xs.ncols();
    let h = xs.transpose() * &xs + DMatrix::identity(d, d) * lambda;
    let chol = Cholesky::new(h).ok_or_else(|| Error::LinearAlgebra("ridge Hessian is not positive definite".into()))?;
    let w = chol.solve(&(xs.transpose() * &ys));
    let n = t.rows() as f64;
    let rt = &xt * &w - yt;
    let value = rt.norm_squared() / (2.0 * n);
    let g = xt.transpose() * &rt / n;
    let v = chol.solve(&g);
    let rs = &xs * &w - ys;
    let full = -(&rs * v.transpose() + (&xs * &v) * w.transpose());
    let grad = Matrix::from_nalgebra(&full.columns(0, s.cols()).into_owned());
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::krr::one_hot;
    use crate::models::Activation;

    #[test]
    fn cig_matches_differences() {
        let t = Matrix::from_rows(&[[0.1, 0.3], [0.9, 0.2], [0.4, 0.8], [0.7, 0.6], [0.2, 0.1]]).unwrap();
        let yt = one_hot(&[0, 1, 0, 1, 0], 2);
        let s = Matrix::from_rows(&[[0.3, 0.4], [0.6, 0.5]]).unwrap();
        let ys = one_hot(&[0, 1], 2);
        let (_, g) = cig_ridge(&t, &yt, &s, &ys, 0.1).unwrap();
        let fd = central_difference(s.as_slice(), 1e-6, |v| {
            Ok(cig_ridge(&t, &yt, &Matrix::from_vec(2, 2, v.to_vec())?, &ys, 0.1)?.0)
        })
        .unwrap();
        for (a, b) in g.as_slice().iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn paths_start_at_initialization() {
        let m = Mlp::new(&[2, 3, 2], Activation::Relu, 1).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2], [0.8, 0.9]]).unwrap();
        let p = gd_path(&m, &x, &[0, 1], 0.1, 3).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0], m.params());
        assert_eq!(trajectory_mismatch(&p, &p), 0.0);
    }
}
