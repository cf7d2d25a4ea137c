//! Matching objectives with analytic gradients in the synthetic points.

use rayon::prelude::*;

use super::privacy::{add_gaussian_noise, clip_to_norm};
use crate::augment::{
    apply_channel_mixers, channel_mixers, channel_mixers_vjp, multi_formation, multi_formation_vjp, AugParams,
    ImageBatch, SiameseOp,
};
use crate::error::{Error, Result};
use crate::kernels::{grad_second, KernelSpec, RandomFeatures};
use crate::matrix::{axpy, dot, KahanSum, Matrix};
use crate::models::{dominant_hessian_eigenvalue, Loss, Mlp};
use crate::seed;

/// Statistic compared between real and synthetic classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum StatKind {
    /// Feature means: logits only, or every layer.
    Dm { layerwise: bool },
    /// Mean and population variance of the logits.
    Moment,
    /// Means of the squared activations of every layer.
    Sam,
    Gm { contrastive: bool },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DpGrad {
    pub sigma: f64,
    pub clip: f64,
}

/// Per-class real statistic of one model.
#[derive(Debug, Clone)]
pub(crate) enum TStat {
    Layers(Vec<Vec<f64>>),
    Moments(Vec<f64>, Vec<f64>),
    Grad(Vec<f64>),
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.first().map_or(0, |r| r.len());
    let mut acc = vec![KahanSum::default(); n];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            a.add(v);
        }
    }
    acc.iter().map(|a| a.total() / rows.len() as f64).collect()
}

fn sq(v: &[f64]) -> f64 {
    dot(v, v)
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Per-layer feature lists of every row.
fn layer_features(model: &Mlp, x: &Matrix) -> Result<Vec<Vec<Vec<f64>>>> {
    x.iter_rows().map(|r| Ok(model.forward_with_features(r)?.1)).collect()
}

/// Layer `l` statistic (identity or square) averaged over rows; empty when
/// the layer is not used.
fn layer_stats(feats: &[Vec<Vec<f64>>], used: &[bool], square: bool) -> Vec<Vec<f64>> {
    used.iter()
        .enumerate()
        .map(|(l, &u)| {
            if !u {
                return Vec::new();
            }
            let rows: Vec<Vec<f64>> = feats
                .iter()
                .map(|f| {
                    if square {
                        f[l].iter().map(|v| v * v).collect()
                    } else {
                        f[l].clone()
                    }
                })
                .collect();
            mean_rows(&rows)
        })
        .collect()
}

fn moments(feats: &[Vec<Vec<f64>>]) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<Vec<f64>> = feats.iter().map(|f| f.last().unwrap().clone()).collect();
    let mean = mean_rows(&logits);
    let sqdev: Vec<Vec<f64>> = logits
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).collect())
        .collect();
    (mean, mean_rows(&sqdev))
}

fn used_layers(kind: StatKind, layers: usize) -> Vec<bool> {
    match kind {
        StatKind::Dm { layerwise: false } | StatKind::Moment => (0..layers).map(|l| l + 1 == layers).collect(),
        _ => vec![true; layers],
    }
}

/// Real-side statistics of one model for every class.
pub(crate) fn real_stats(
    kind: StatKind,
    model: &Mlp,
    t: &[Matrix],
    dp: Option<(DpGrad, u64)>,
) -> Result<Vec<TStat>> {
    let layers = model.widths().len() - 1;
    t.iter()
        .enumerate()
        .map(|(y, ty)| {
            if ty.is_empty() {
                return Err(Error::EmptyClass(y));
            }
            Ok(match kind {
                StatKind::Dm { .. } | StatKind::Sam => {
                    let f = layer_features(model, ty)?;
                    TStat::Layers(layer_stats(&f, &used_layers(kind, layers), kind == StatKind::Sam))
                }
                StatKind::Moment => {
                    let (m, v) = moments(&layer_features(model, ty)?);
                    TStat::Moments(m, v)
                }
                StatKind::Gm { .. } => match dp {
                    Some((p, noise_seed)) if p.sigma > 0.0 => {
                        let grads: Vec<Vec<f64>> = ty
                            .iter_rows()
                            .map(|r| {
                                let mut g = model.sample_param_grad(r, y, Loss::CrossEntropy)?.1;
                                clip_to_norm(&mut g, p.clip);
                                Ok(g)
                            })
                            .collect::<Result<_>>()?;
                        let mut g = mean_rows(&grads);
                        add_gaussian_noise(&mut g, p.sigma, seed::derive_indexed(noise_seed, "class", y as u64));
                        TStat::Grad(g)
                    }
                    _ => TStat::Grad(class_grad(model, ty, y)?),
                },
            })
        })
        .collect()
}

fn class_grad(model: &Mlp, x: &Matrix, y: usize) -> Result<Vec<f64>> {
    model.mean_param_grad(x, &vec![y; x.rows()], Loss::CrossEntropy)
}

/// Objective value of one model and its gradient in every synthetic row,
/// grouped by class.
pub(crate) fn model_value_grad(
    kind: StatKind,
    model: &Mlp,
    t: &[TStat],
    s: &[Matrix],
) -> Result<(f64, Vec<Matrix>)> {
    let layers = model.widths().len() - 1;
    let mut value = KahanSum::default();
    let mut grads: Vec<Matrix> = s.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    match kind {
        StatKind::Dm { .. } | StatKind::Sam | StatKind::Moment => {
            for (y, sy) in s.iter().enumerate() {
                if sy.is_empty() {
                    continue;
                }
                let mf = sy.rows() as f64;
                let feats = layer_features(model, sy)?;
                let used = used_layers(kind, layers);
                let upstream: Vec<Vec<Vec<f64>>> = match (&t[y], kind) {
                    (TStat::Layers(tl), _) => {
                        let sam = kind == StatKind::Sam;
                        let sl = layer_stats(&feats, &used, sam);
                        let d: Vec<Vec<f64>> = tl.iter().zip(&sl).map(|(a, b)| diff(a, b)).collect();
                        for dl in &d {
                            value.add(sq(dl));
                        }
                        feats
                            .iter()
                            .map(|f| {
                                d.iter()
                                    .enumerate()
                                    .map(|(l, dl)| {
                                        if dl.is_empty() {
                                            Vec::new()
                                        } else if sam {
                                            dl.iter().zip(&f[l]).map(|(a, v)| -2.0 / mf * a * 2.0 * v).collect()
                                        } else {
                                            dl.iter().map(|a| -2.0 / mf * a).collect()
                                        }
                                    })
                                    .collect()
                            })
                            .collect()
                    }
                    (TStat::Moments(tm, tv), _) => {
                        let (sm, sv) = moments(&feats);
                        let dm = diff(tm, &sm);
                        let dv = diff(tv, &sv);
                        value.add(sq(&dm));
                        value.add(sq(&dv));
                        feats
                            .iter()
                            .map(|f| {
                                let z = f.last().unwrap();
                                let mut up = vec![Vec::new(); layers];
                                up[layers - 1] = (0..z.len())
                                    .map(|k| -2.0 / mf * dm[k] - 2.0 * dv[k] * (2.0 / mf) * (z[k] - sm[k]))
                                    .collect();
                                up
                            })
                            .collect()
                    }
                    _ => return Err(Error::Numerical("statistic kind mismatch".into())),
                };
                for (j, up) in upstream.iter().enumerate() {
                    let g = model.feature_vjp(sy.row(j), up)?;
                    grads[y].row_mut(j).copy_from_slice(&g);
                }
            }
        }
        StatKind::Gm { contrastive } => {
            let gs: Vec<Option<Vec<f64>>> = s
                .iter()
                .enumerate()
                .map(|(y, sy)| if sy.is_empty() { Ok(None) } else { class_grad(model, sy, y).map(Some) })
                .collect::<Result<_>>()?;
            let tg = |y: usize| -> Result<&Vec<f64>> {
                match &t[y] {
                    TStat::Grad(g) => Ok(g),
                    _ => Err(Error::Numerical("statistic kind mismatch".into())),
                }
            };
            let directions: Vec<Option<Vec<f64>>> = if contrastive {
                let p = model.param_count();
                let mut sum_s = vec![0.0; p];
                let mut sum_t = vec![0.0; p];
                for (y, g) in gs.iter().enumerate() {
                    if let Some(g) = g {
                        axpy(&mut sum_s, 1.0, g);
                        axpy(&mut sum_t, 1.0, tg(y)?);
                    }
                }
                let v = diff(&sum_s, &sum_t);
                value.add(sq(&v));
                gs.iter().map(|g| g.as_ref().map(|_| v.clone())).collect()
            } else {
                let mut out = Vec::with_capacity(gs.len());
                for (y, g) in gs.iter().enumerate() {
                    out.push(match g {
                        Some(g) => {
                            let v = diff(g, tg(y)?);
                            value.add(sq(&v));
                            Some(v)
                        }
                        None => None,
                    });
                }
                out
            };
            for (y, sy) in s.iter().enumerate() {
                let Some(v) = &directions[y] else { continue };
                let scale = 2.0 / sy.rows() as f64;
                for j in 0..sy.rows() {
                    let g = model.mixed_input_grad(sy.row(j), y, Loss::CrossEntropy, v)?;
                    for (o, gi) in grads[y].row_mut(j).iter_mut().zip(g) {
                        *o = scale * gi;
                    }
                }
            }
        }
    }
    Ok((value.total(), grads))
}

/// Fixed direction and real-side curvature for the curvature-matching
/// penalty of one model, valid until the next refresh.
#[derive(Debug, Clone)]
pub(crate) struct CurvatureCache {
    direction: Vec<f64>,
    real_curv: f64,
}

const CURV_H: f64 = 1e-3;
pub(crate) const CURV_SUBSAMPLE: usize = 256;

fn second_difference_loss(model: &Mlp, v: &[f64], x: &Matrix, labels: &[usize]) -> Result<f64> {
    let p = model.params();
    let plus: Vec<f64> = p.iter().zip(v).map(|(a, b)| a + CURV_H * b).collect();
    let minus: Vec<f64> = p.iter().zip(v).map(|(a, b)| a - CURV_H * b).collect();
    let lp = model.with_params(plus)?.loss(x, labels, Loss::CrossEntropy)?;
    let lm = model.with_params(minus)?.loss(x, labels, Loss::CrossEntropy)?;
    let l0 = model.loss(x, labels, Loss::CrossEntropy)?;
    Ok((lp - 2.0 * l0 + lm) / (CURV_H * CURV_H))
}

pub(crate) fn curvature_cache(
    model: &Mlp,
    t: &Matrix,
    tl: &[usize],
    s: &Matrix,
    sl: &[usize],
    iters: usize,
    seed: u64,
) -> Result<CurvatureCache> {
    let grad = |p: &[f64]| -> Result<Vec<f64>> {
        let m = model.with_params(p.to_vec())?;
        let gt = m.mean_param_grad(t, tl, Loss::CrossEntropy)?;
        let gs = m.mean_param_grad(s, sl, Loss::CrossEntropy)?;
        Ok(diff(&gt, &gs))
    };
    let eig = dominant_hessian_eigenvalue(model.params(), grad, iters, seed)?;
    let real_curv = second_difference_loss(model, &eig.vector, t, tl)?;
    Ok(CurvatureCache {
        direction: eig.vector,
        real_curv,
    })
}

/// `½ρ|vᵀ(H_T − H_S)v|` with `v` frozen, and its gradient in the rows of `s`.
pub(crate) fn curvature_penalty(
    model: &Mlp,
    cache: &CurvatureCache,
    s: &Matrix,
    sl: &[usize],
    rho: f64,
) -> Result<(f64, Matrix)> {
    let v = &cache.direction;
    let q = cache.real_curv - second_difference_loss(model, v, s, sl)?;
    let p = model.params();
    let shifted = |sign: f64| -> Result<Matrix> {
        let q: Vec<f64> = p.iter().zip(v).map(|(a, b)| a + sign * CURV_H * b).collect();
        Ok(model.with_params(q)?.backward(s, sl, Loss::CrossEntropy)?.input_grads)
    };
    let (gp, g0, gm) = (shifted(1.0)?, model.backward(s, sl, Loss::CrossEntropy)?.input_grads, shifted(-1.0)?);
    let sign = if q >= 0.0 { 1.0 } else { -1.0 };
    let coef = -0.5 * rho * sign / (CURV_H * CURV_H);
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    for (o, ((a, b), c)) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(gp.as_slice().iter().zip(g0.as_slice()).zip(gm.as_slice()))
    {
        *o = coef * (a - 2.0 * b + c);
    }
    Ok((0.5 * rho * q.abs(), grad))
}

/// Real-side kernel statistic for one class.
#[derive(Debug, Clone)]
pub(crate) enum KernelStat {
    /// Noised or exact mean random-feature embedding.
    Embedding(Vec<f64>),
    /// `mean k(T, T)` together with the class rows.
    Gram { ktt: f64, rows: Matrix },
}

pub(crate) fn kernel_stat(spec: &KernelSpec, t: &Matrix) -> Result<KernelStat> {
    if t.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(match spec {
        KernelSpec::RandomFeature(rf) => KernelStat::Embedding(rf.embedding(t)?),
        _ => {
            let k = crate::kernels::gram_matrix(spec, t, t)?;
            let mut acc = KahanSum::default();
            for &v in k.as_slice() {
                acc.add(v);
            }
            KernelStat::Gram {
                ktt: acc.total() / k.as_slice().len() as f64,
                rows: t.clone(),
            }
        }
    })
}

fn rf_of(spec: &KernelSpec) -> Option<&RandomFeatures> {
    match spec {
        KernelSpec::RandomFeature(rf) => Some(rf),
        _ => None,
    }
}

/// Squared MMD of one class and its gradient in the synthetic rows.
pub(crate) fn kernel_value_grad(spec: &KernelSpec, t: &KernelStat, s: &Matrix) -> Result<(f64, Matrix)> {
    let ns = s.rows() as f64;
    let mut grad = Matrix::zeros(s.rows(), s.cols());
    match t {
        KernelStat::Embedding(mu_t) => {
            let rf = rf_of(spec).ok_or_else(|| Error::config("embedding statistic needs random features"))?;
            let mu_s = rf.embedding(s)?;
            let d = diff(mu_t, &mu_s);
            let up: Vec<f64> = d.iter().map(|v| -2.0 / ns * v).collect();
            for j in 0..s.rows() {
                let g = rf.vjp(s.row(j), &up);
                grad.row_mut(j).copy_from_slice(&g);
            }
            Ok((sq(&d), grad))
        }
        KernelStat::Gram { ktt, rows } => {
            let nt = rows.rows() as f64;
            let kts = crate::kernels::gram_matrix(spec, rows, s)?;
            let kss = crate::kernels::gram_matrix(spec, s, s)?;
            let mean = |k: &Matrix| {
                let mut acc = KahanSum::default();
                for &v in k.as_slice() {
                    acc.add(v);
                }
                acc.total() / k.as_slice().len() as f64
            };
            let value = ktt - 2.0 * mean(&kts) + mean(&kss);
            let out: Vec<Vec<f64>> = (0..s.rows())
                .into_par_iter()
                .map(|j| {
                    let sj = s.row(j);
                    let mut g = vec![0.0; s.cols()];
                    for ti in rows.iter_rows() {
                        axpy(&mut g, -2.0 / (nt * ns), &grad_second(spec, ti, sj)?);
                    }
                    for sl in s.iter_rows() {
                        axpy(&mut g, 2.0 / (ns * ns), &grad_second(spec, sl, sj)?);
                    }
                    Ok(g)
                })
                .collect::<Result<_>>()?;
            for (j, r) in out.into_iter().enumerate() {
                grad.row_mut(j).copy_from_slice(&r);
            }
            Ok((value, grad))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum AugOp {
    Siamese(SiameseOp),
    Multiform(usize),
    Channel,
}

/// Ordered chain of image augmentations on `(c, h, w)` rows.
#[derive(Debug, Clone)]
pub(crate) struct AugPipeline {
    pub ops: Vec<AugOp>,
    pub shape: [usize; 3],
}

/// Random choices of one outer step.
#[derive(Debug, Clone)]
pub(crate) struct AugDraw {
    params: Vec<Option<AugParams>>,
    seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Side {
    Real,
    Synthetic,
}

enum TapeEntry {
    Siamese(AugParams, ImageBatch),
    Multiform(usize, [usize; 4]),
    Channel(Vec<Matrix>, ImageBatch),
}

pub(crate) struct Tape(Vec<TapeEntry>);

impl AugPipeline {
    pub fn is_random(&self) -> bool {
        self.ops.iter().any(|op| !matches!(op, AugOp::Multiform(_)))
    }

    pub fn out_dim(&self) -> usize {
        let [c, h, w] = self.shape;
        let mut ch = c;
        for op in &self.ops {
            if let AugOp::Multiform(r) = op {
                ch *= r * r + 1;
            }
        }
        ch * h * w
    }

    pub fn draw(&self, seed: u64, step: usize) -> AugDraw {
        let s = seed::derive_indexed(seed, "augment", step as u64);
        let [_, h, w] = self.shape;
        let params = self
            .ops
            .iter()
            .enumerate()
            .map(|(i, op)| match op {
                AugOp::Siamese(kind) => Some(AugParams::draw(*kind, h, w, seed::derive_indexed(s, "siamese", i as u64))),
                _ => None,
            })
            .collect();
        AugDraw { params, seed: s }
    }

    pub fn apply(&self, x: &Matrix, draw: &AugDraw, side: Side, class: usize) -> Result<(Matrix, Tape)> {
        let [c, h, w] = self.shape;
        let mut cur = ImageBatch::from_rows(x, c, h, w)?;
        let mut tape = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            match *op {
                AugOp::Siamese(_) => {
                    let p = draw.params[i].expect("drawn");
                    let out = p.apply(&cur);
                    tape.push(TapeEntry::Siamese(p, cur));
                    cur = out;
                }
                AugOp::Multiform(r) => {
                    let out = multi_formation(&cur, r)?;
                    tape.push(TapeEntry::Multiform(r, cur.shape()));
                    cur = out;
                }
                AugOp::Channel => {
                    let tag = match side {
                        Side::Real => "mix-real",
                        Side::Synthetic => "mix-synthetic",
                    };
                    let [b, ch, _, _] = cur.shape();
                    let mixers = channel_mixers(b, ch, seed::derive_indexed(draw.seed ^ i as u64, tag, class as u64));
                    let out = apply_channel_mixers(&cur, &mixers)?;
                    tape.push(TapeEntry::Channel(mixers, cur));
                    cur = out;
                }
            }
        }
        Ok((cur.to_rows(), Tape(tape)))
    }

    pub fn vjp(&self, tape: &Tape, g: &Matrix) -> Result<Matrix> {
        let last_shape = |e: &TapeEntry| -> [usize; 4] {
            match e {
                TapeEntry::Siamese(_, x) | TapeEntry::Channel(_, x) => x.shape(),
                TapeEntry::Multiform(_, s) => *s,
            }
        };
        let out_shape = match tape.0.last() {
            None => return Ok(g.clone()),
            Some(TapeEntry::Multiform(r, [b, c, h, w])) => [*b, c * (r * r + 1), *h, *w],
            Some(TapeEntry::Channel(_, x)) => {
                let [b, c, h, w] = x.shape();
                [4 * b, c, h, w]
            }
            Some(e) => last_shape(e),
        };
        let mut cur = ImageBatch::new(out_shape, g.as_slice().to_vec())?;
        for e in tape.0.iter().rev() {
            cur = match e {
                TapeEntry::Siamese(p, x) => p.vjp(x, &cur),
                TapeEntry::Multiform(r, shape) => multi_formation_vjp(*shape, *r, &cur)?,
                TapeEntry::Channel(m, x) => channel_mixers_vjp(x, m, &cur)?,
            };
        }
        Ok(cur.to_rows())
    }
}
