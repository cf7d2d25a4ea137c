use rand_distr::{Distribution, StandardNormal};

use super::{Loss, Mlp};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::seed;

#[derive(Debug, Clone)]
pub struct HessianEigen {
    pub value: f64,
    pub vector: Vec<f64>,
}

/// Power iteration on the Hessian of a scalar function given only its
/// gradient. Hessian-vector products use central differences with step
/// `h = 1e-4·(1+‖θ‖)`. The returned eigenvalue is the Rayleigh quotient of
/// the final iterate (signed).
pub fn dominant_hessian_eigenvalue<F>(theta: &[f64], grad: F, iters: usize, seed: u64) -> Result<HessianEigen>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if iters == 0 {
        return Err(Error::config("power iteration needs at least one step"));
    }
    if theta.is_empty() {
        return Err(Error::shape("empty parameter vector"));
    }
    let h = 1e-4 * (1.0 + norm(theta));
    let hvp = |v: &[f64]| -> Result<Vec<f64>> {
        let plus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t + h * vi).collect();
        let minus: Vec<f64> = theta.iter().zip(v).map(|(t, vi)| t - h * vi).collect();
        let gp = grad(&plus)?;
        let gm = grad(&minus)?;
        let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite Hessian-vector product".into()));
        }
        Ok(out)
    };
    let mut rng = seed::rng(seed);
    let mut v: Vec<f64> = (0..theta.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let nv = norm(&v).max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut value = 0.0;
    for _ in 0..iters {
        let hv = hvp(&v)?;
        value = dot(&v, &hv);
        let n = norm(&hv);
        if n == 0.0 {
            return Ok(HessianEigen { value: 0.0, vector: v });
        }
        v = hv.into_iter().map(|x| x / n).collect();
    }
    Ok(HessianEigen { value, vector: v })
}

/// Dominant eigenvalue of the Hessian of the mean training loss in θ.
pub fn lambda_max_estimate(
    model: &Mlp,
    x: &Matrix,
    labels: &[usize],
    loss: Loss,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let grad = |p: &[f64]| -> Result<Vec<f64>> {
        let m = Mlp::from_params(model.widths(), model.activation(), p.to_vec())
            .map_err(|_| Error::Numerical("non-finite parameters in Hessian probe".into()))?;
        m.mean_param_grad(x, labels, loss)
    };
    Ok(dominant_hessian_eigenvalue(model.params(), grad, iters, seed)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_hooks() {
        let theta = vec![0.3, -1.2, 0.7, 2.0];
        let unit = dominant_hessian_eigenvalue(&theta, |p| Ok(p.to_vec()), 5, 1).unwrap();
        assert!((unit.value - 1.0).abs() <= 1e-6);
        let a = 7.5;
        let scaled = dominant_hessian_eigenvalue(&theta, |p| Ok(p.iter().map(|v| a * v).collect()), 5, 2).unwrap();
        assert!((scaled.value - a).abs() <= 1e-6 * a);
    }

    #[test]
    fn non_finite_hvp_is_numerical_error() {
        let r = dominant_hessian_eigenvalue(&[1.0], |_| Ok(vec![f64::NAN]), 3, 0);
        assert!(matches!(r, Err(Error::Numerical(_))));
    }
}
