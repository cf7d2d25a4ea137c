//! Kernel families, Gram matrices, random feature maps and the kernel-only
//! MMD estimator.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dist, dot, sq_dist, KahanSum, Matrix};
use crate::models::Mlp;
use crate::seed;
use crate::spaces::LinearAutoencoder;

/// Random Fourier features `φ(x) = sqrt(2/p)·cos(Wx + b)` with rows of `W`
/// drawn from `N(0, σ⁻² I)` and `b ~ U[0, 2π)`. The draw is a pure function of
/// `(seed, p, n)` and is stored once, so a feature map stays fixed across an
/// optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomFeatures {
    pub seed: u64,
    pub sigma: f64,
    w: Matrix,
    b: Vec<f64>,
}

impl RandomFeatures {
    pub fn new(p: usize, n: usize, sigma: f64, seed: u64) -> Result<Self> {
        if p == 0 || n == 0 {
            return Err(Error::config("random features need p >= 1 and n >= 1"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::config(format!("bandwidth must be positive, got {sigma}")));
        }
        let mut rng = seed::rng(seed::derive_indexed(seed, "rff", (p as u64) << 32 | n as u64));
        let normal = Normal::new(0.0, 1.0 / sigma).expect("valid normal");
        let mut w = Matrix::zeros(p, n);
        for v in w.as_mut_slice() {
            *v = normal.sample(&mut rng);
        }
        let b = (0..p)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Ok(RandomFeatures { seed, sigma, w, b })
    }

    pub fn dim(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn map(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "feature map expects {} coordinates, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        let scale = (2.0 / self.dim() as f64).sqrt();
        Ok((0..self.dim())
            .map(|i| scale * (dot(self.w.row(i), x) + self.b[i]).cos())
            .collect())
    }

    /// Mean feature vector of the rows of `x` (the empirical kernel embedding).
    pub fn embedding(&self, x: &Matrix) -> Result<Vec<f64>> {
        let mut acc = vec![KahanSum::default(); self.dim()];
        for r in x.iter_rows() {
            for (a, v) in acc.iter_mut().zip(self.map(r)?) {
                a.add(v);
            }
        }
        let n = x.rows().max(1) as f64;
        Ok(acc.into_iter().map(|a| a.total() / n).collect())
    }

    /// `J_φ(x)ᵀ g`.
    pub fn vjp(&self, x: &[f64], g: &[f64]) -> Vec<f64> {
        let scale = (2.0 / self.dim() as f64).sqrt();
        let mut out = vec![0.0; self.input_dim()];
        for i in 0..self.dim() {
            let wi = self.w.row(i);
            let s = -scale * (dot(wi, x) + self.b[i]).sin() * g[i];
            for (o, &w) in out.iter_mut().zip(wi) {
                *o += s * w;
            }
        }
        out
    }
}

/// Kernel family with its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−c‖x₁−x₂‖^γ)`, `0 < γ ≤ 2`, `c > 0`. `γ = 2` is the Gaussian kernel.
    GammaExponential { gamma: f64, c: f64 },
    /// `x₁ᵀx₂`.
    Linear,
    RandomFeature(RandomFeatures),
    /// `Σ_c ∇_θ f_c(x₁)ᵀ∇_θ f_c(x₂)`, averaged over the models. With
    /// `bias = false` only weight coordinates of θ enter the inner product.
    EmpiricalNtk { models: Vec<Mlp>, bias: bool },
    /// Inner product of last-hidden-layer features.
    Nfk { model: Mlp },
    /// `base(g_e(x₁), g_e(x₂))`.
    Pullback {
        encoder: LinearAutoencoder,
        base: Box<KernelSpec>,
    },
}

impl KernelSpec {
    pub fn gaussian(c: f64) -> Result<Self> {
        KernelSpec::gamma_exponential(2.0, c)
    }

    pub fn gamma_exponential(gamma: f64, c: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 2.0) {
            return Err(Error::config(format!("gamma must lie in (0, 2], got {gamma}")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::config(format!("scale c must be positive, got {c}")));
        }
        Ok(KernelSpec::GammaExponential { gamma, c })
    }

    pub fn random_feature(p: usize, n: usize, sigma: f64, seed: u64) -> Result<Self> {
        Ok(KernelSpec::RandomFeature(RandomFeatures::new(p, n, sigma, seed)?))
    }

    pub fn empirical_ntk(models: Vec<Mlp>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::config("empirical NTK needs at least one model"));
        }
        Ok(KernelSpec::EmpiricalNtk { models, bias: true })
    }

    pub fn pullback(encoder: LinearAutoencoder, base: KernelSpec) -> Self {
        KernelSpec::Pullback {
            encoder,
            base: Box::new(base),
        }
    }

    /// Short family name for reports.
    pub fn family(&self) -> &'static str {
        match self {
            KernelSpec::GammaExponential { .. } => "gamma_exponential",
            KernelSpec::Linear => "linear",
            KernelSpec::RandomFeature(_) => "random_feature",
            KernelSpec::EmpiricalNtk { .. } => "empirical_ntk",
            KernelSpec::Nfk { .. } => "nfk",
            KernelSpec::Pullback { .. } => "pullback",
        }
    }

    /// Hyperparameters for reports (model parameters are summarized, not dumped).
    pub fn describe(&self) -> serde_json::Value {
        use serde_json::json;
        match self {
            KernelSpec::GammaExponential { gamma, c } => json!({"family": "gamma_exponential", "gamma": gamma, "c": c}),
            KernelSpec::Linear => json!({"family": "linear"}),
            KernelSpec::RandomFeature(rf) => json!({
                "family": "random_feature", "p": rf.dim(), "sigma": rf.sigma, "seed": rf.seed
            }),
            KernelSpec::EmpiricalNtk { models, bias } => json!({
                "family": "empirical_ntk",
                "ensemble": models.len(),
                "widths": models[0].widths(),
                "seeds": models.iter().map(|m| m.seed()).collect::<Vec<_>>(),
                "bias": bias
            }),
            KernelSpec::Nfk { model } => json!({
                "family": "nfk", "widths": model.widths(), "seed": model.seed()
            }),
            KernelSpec::Pullback { encoder, base } => json!({
                "family": "pullback",
                "latent_dim": encoder.latent_dim(),
                "base": base.describe()
            }),
        }
    }

    /// Explicit finite-dimensional feature map, when the family has one.
    pub fn features(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        Ok(match self {
            KernelSpec::GammaExponential { .. } => None,
            KernelSpec::Linear => Some(x.to_vec()),
            KernelSpec::RandomFeature(rf) => Some(rf.map(x)?),
            KernelSpec::EmpiricalNtk { models, bias } => {
                let scale = 1.0 / (models.len() as f64).sqrt();
                let mut out = Vec::new();
                for m in models {
                    for c in 0..m.output_dim() {
                        let g = m.output_param_grad(x, c)?;
                        if *bias {
                            out.extend(g.iter().map(|v| v * scale));
                        } else {
                            out.extend(weight_coordinates(m, &g).map(|v| v * scale));
                        }
                    }
                }
                Some(out)
            }
            KernelSpec::Nfk { model } => Some(model.penultimate(x)?),
            KernelSpec::Pullback { encoder, base } => base.features(&encoder.encode(x)?)?,
        })
    }

    pub fn eval(&self, x1: &[f64], x2: &[f64]) -> Result<f64> {
        kernel_eval(self, x1, x2)
    }
}

fn weight_coordinates<'a>(m: &Mlp, g: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    let mut mask = Vec::with_capacity(g.len());
    for w in m.widths().windows(2) {
        mask.extend(std::iter::repeat_n(true, w[0] * w[1]));
        mask.extend(std::iter::repeat_n(false, w[1]));
    }
    g.iter().zip(mask).filter(|(_, keep)| *keep).map(|(v, _)| *v)
}

pub fn kernel_eval(spec: &KernelSpec, x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(Error::shape(format!(
            "kernel arguments have {} and {} coordinates",
            x1.len(),
            x2.len()
        )));
    }
    match spec {
        KernelSpec::GammaExponential { gamma, c } => Ok(gamma_exp(*gamma, *c, x1, x2)),
        KernelSpec::Linear => Ok(dot(x1, x2)),
        KernelSpec::Pullback { encoder, base } => {
            kernel_eval(base, &encoder.encode(x1)?, &encoder.encode(x2)?)
        }
        _ => {
            let a = spec.features(x1)?.expect("explicit features");
            let b = spec.features(x2)?.expect("explicit features");
            Ok(dot(&a, &b))
        }
    }
}

#[inline]
fn gamma_exp(gamma: f64, c: f64, x1: &[f64], x2: &[f64]) -> f64 {
    let d2 = sq_dist(x1, x2);
    if gamma == 2.0 {
        (-c * d2).exp()
    } else {
        (-c * d2.powf(gamma / 2.0)).exp()
    }
}

/// Gram matrix `K[i,j] = k(A_i, B_j)`, rows computed in parallel.
pub fn gram_matrix(spec: &KernelSpec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() > 0 && b.rows() > 0 && a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "gram of {}-dim and {}-dim points",
            a.cols(),
            b.cols()
        )));
    }
    let fa = feature_rows(spec, a)?;
    let fb = feature_rows(spec, b)?;
    let rows: Vec<Vec<f64>> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            (0..b.rows())
                .map(|j| match (&fa, &fb) {
                    (Some(fa), Some(fb)) => Ok(dot(&fa[i], &fb[j])),
                    _ => kernel_eval(spec, a.row(i), b.row(j)),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).copy_from_slice(&r);
    }
    Ok(out)
}

fn feature_rows(spec: &KernelSpec, x: &Matrix) -> Result<Option<Vec<Vec<f64>>>> {
    if matches!(spec, KernelSpec::GammaExponential { .. } | KernelSpec::Linear) {
        return Ok(None);
    }
    if let KernelSpec::Pullback { base, .. } = spec {
        if matches!(**base, KernelSpec::GammaExponential { .. }) {
            return Ok(None);
        }
    }
    let rows: Vec<Option<Vec<f64>>> = (0..x.rows())
        .into_par_iter()
        .map(|i| spec.features(x.row(i)))
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().collect())
}

/// Explicit feature vector for a random-feature kernel.
pub fn random_feature_map(spec: &KernelSpec, x: &[f64]) -> Result<Vec<f64>> {
    match spec {
        KernelSpec::RandomFeature(rf) => rf.map(x),
        _ => Err(Error::config("random_feature_map needs a random_feature kernel")),
    }
}

/// Biased V-statistic `mean k(T,T) − 2 mean k(T,S) + mean k(S,S)`, diagonal
/// terms included. Can be a few ulps below zero.
pub fn mmd_squared(spec: &KernelSpec, t: &Matrix, s: &Matrix) -> Result<f64> {
    if t.is_empty() || s.is_empty() {
        return Err(Error::domain("MMD needs two nonempty point sets"));
    }
    let ktt = mean_entry(&gram_matrix(spec, t, t)?);
    let kts = mean_entry(&gram_matrix(spec, t, s)?);
    let kss = mean_entry(&gram_matrix(spec, s, s)?);
    Ok(ktt - 2.0 * kts + kss)
}

fn mean_entry(k: &Matrix) -> f64 {
    let mut acc = KahanSum::default();
    for &v in k.as_slice() {
        acc.add(v);
    }
    acc.total() / k.as_slice().len() as f64
}

/// `∇_s k(x, s)`. Analytic for γ-exponential, linear, random-feature and
/// pullback-of-analytic kernels; central differences (step 1e-6) otherwise.
pub fn grad_second(spec: &KernelSpec, x: &[f64], s: &[f64]) -> Result<Vec<f64>> {
    if x.len() != s.len() {
        return Err(Error::shape("kernel arguments differ in dimension"));
    }
    match spec {
        KernelSpec::GammaExponential { gamma, c } => {
            let r = dist(x, s);
            if r == 0.0 {
                return Ok(vec![0.0; s.len()]);
            }
            let k = gamma_exp(*gamma, *c, x, s);
            let coef = k * c * gamma * r.powf(gamma - 2.0);
            Ok(x.iter().zip(s).map(|(a, b)| coef * (a - b)).collect())
        }
        KernelSpec::Linear => Ok(x.to_vec()),
        KernelSpec::RandomFeature(rf) => Ok(rf.vjp(s, &rf.map(x)?)),
        KernelSpec::Pullback { encoder, base } if base.has_analytic_gradient() => {
            let g = grad_second(base, &encoder.encode(x)?, &encoder.encode(s)?)?;
            Ok(encoder.encode_vjp(&g))
        }
        _ => {
            let h = 1e-6;
            let mut out = Vec::with_capacity(s.len());
            let mut sp = s.to_vec();
            for j in 0..s.len() {
                sp[j] = s[j] + h;
                let up = kernel_eval(spec, x, &sp)?;
                sp[j] = s[j] - h;
                let down = kernel_eval(spec, x, &sp)?;
                sp[j] = s[j];
                out.push((up - down) / (2.0 * h));
            }
            Ok(out)
        }
    }
}

impl KernelSpec {
    pub fn has_analytic_gradient(&self) -> bool {
        match self {
            KernelSpec::GammaExponential { .. } | KernelSpec::Linear | KernelSpec::RandomFeature(_) => true,
            KernelSpec::Pullback { base, .. } => base.has_analytic_gradient(),
            _ => false,
        }
    }
}

/// `mmd_squared` together with its gradient in every row of `s`.
pub fn mmd_squared_with_grad(spec: &KernelSpec, t: &Matrix, s: &Matrix) -> Result<(f64, Matrix)> {
    let value = mmd_squared(spec, t, s)?;
    let (nt, ns) = (t.rows() as f64, s.rows() as f64);
    let rows: Vec<Vec<f64>> = (0..s.rows())
        .into_par_iter()
        .map(|j| {
            let sj = s.row(j);
            let mut g = vec![0.0; s.cols()];
            for ti in t.iter_rows() {
                crate::matrix::axpy(&mut g, -2.0 / (nt * ns), &grad_second(spec, ti, sj)?);
            }
            for sl in s.iter_rows() {
                crate::matrix::axpy(&mut g, 2.0 / (ns * ns), &grad_second(spec, sl, sj)?);
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    for (j, r) in rows.into_iter().enumerate() {
        grad.row_mut(j).copy_from_slice(&r);
    }
    Ok((value, grad))
}

/// Median of the pairwise Euclidean distances between distinct rows; falls
/// back to 1 when all rows coincide or there is a single row.
pub fn median_heuristic(x: &Matrix) -> f64 {
    let mut d = Vec::new();
    for i in 0..x.rows() {
        for j in i + 1..x.rows() {
            d.push(dist(x.row(i), x.row(j)));
        }
    }
    d.retain(|v| *v > 0.0);
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    }
}

/// Gaussian kernel `exp(−‖x−y‖²/(2σ²))` with σ from [`median_heuristic`].
/// Large sets are thinned to a deterministic stride of at most 1000 rows.
pub fn median_gaussian(x: &Matrix) -> Result<(KernelSpec, f64)> {
    let stride = x.rows().div_ceil(1000).max(1);
    let idx: Vec<usize> = (0..x.rows()).step_by(stride).collect();
    let sigma = median_heuristic(&x.select_rows(&idx));
    Ok((KernelSpec::gaussian(1.0 / (2.0 * sigma * sigma))?, sigma))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_examples() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        assert_eq!(k.eval(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        let v = k.eval(&[0.0, 0.0], &[0.6, 0.8]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() <= 1e-15);
    }

    #[test]
    fn mmd_hand_examples() {
        let k = KernelSpec::gaussian(1.0).unwrap();
        let e1 = (-1.0f64).exp();
        let v = mmd_squared(&k, &Matrix::column(&[0.0]), &Matrix::column(&[1.0])).unwrap();
        assert!((v - (2.0 - 2.0 * e1)).abs() <= 1e-12);
        let v = mmd_squared(&k, &Matrix::column(&[0.0, 2.0]), &Matrix::column(&[1.0])).unwrap();
        let want = (0.5 + 0.5 * (-4.0f64).exp()) - 2.0 * e1 + 1.0;
        assert!((v - want).abs() <= 1e-12);
        assert!((want - 0.773399).abs() < 1e-6);
        let t = Matrix::from_rows(&[[0.1, 0.2], [0.5, 0.9]]).unwrap();
        assert!(mmd_squared(&k, &t, &t).unwrap().abs() <= 1e-12);
        assert!(matches!(
            mmd_squared(&k, &Matrix::zeros(0, 2), &t),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ntk_of_linear_model_is_inner_product() {
        let m = Mlp::from_params(&[3, 1], crate::models::Activation::Relu, vec![0.4, -0.2, 0.9, 0.1]).unwrap();
        let k = KernelSpec::EmpiricalNtk {
            models: vec![m],
            bias: false,
        };
        let (a, b) = ([0.1, 0.5, 0.2], [0.7, 0.3, 0.6]);
        assert!((k.eval(&a, &b).unwrap() - dot(&a, &b)).abs() <= 1e-15);
    }

    #[test]
    fn random_features_approximate_gaussian() {
        let sigma = 0.8;
        let k = KernelSpec::random_feature(4096, 2, sigma, 11).unwrap();
        let x = [0.2, 0.7];
        let phi = random_feature_map(&k, &x).unwrap();
        assert_eq!(phi, random_feature_map(&k, &x).unwrap());
        assert!((dot(&phi, &phi) - 1.0).abs() <= 0.05);
        let k = KernelSpec::random_feature(8192, 2, sigma, 12).unwrap();
        let approx = dot(&random_feature_map(&k, &[0.2, 0.7]).unwrap(), &random_feature_map(&k, &[1.2, 0.7]).unwrap());
        let exact = (-0.5 / (sigma * sigma)).exp();
        assert!((approx - exact).abs() <= 0.05);
    }

    #[test]
    fn gamma_exponential_gradient_matches_differences() {
        for gamma in [0.7, 1.0, 1.5, 2.0] {
            let k = KernelSpec::gamma_exponential(gamma, 1.3).unwrap();
            let (x, s) = ([0.2, 0.9, 0.4], [0.5, 0.1, 0.45]);
            let g = grad_second(&k, &x, &s).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut sp = s;
                sp[j] += h;
                let up = k.eval(&x, &sp).unwrap();
                sp[j] -= 2.0 * h;
                let down = k.eval(&x, &sp).unwrap();
                assert!((g[j] - (up - down) / (2.0 * h)).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(KernelSpec::gamma_exponential(2.5, 1.0).is_err());
        assert!(KernelSpec::gamma_exponential(1.0, 0.0).is_err());
        assert!(KernelSpec::random_feature(0, 2, 1.0, 0).is_err());
    }
}
