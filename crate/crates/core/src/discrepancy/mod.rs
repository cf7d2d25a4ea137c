//! Discrepancies between a real set `T` and a synthetic set `S`.
//!
//! Suprema over a hypothesis class are taken over a finite [`ModelBatch`].
//! Model-based statistics follow the per-class convention: each class is
//! compared separately and the class terms are summed.

mod transport;

pub use transport::{hungarian, min_cost_transport, wasserstein1};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernels::{median_gaussian, mmd_squared, KernelSpec};
use crate::matrix::{dist, dot, sq_dist, KahanSum, Matrix};
use crate::models::{Activation, Loss, Mlp};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    RandomInit,
    Pretrained,
    TrajectorySnapshots,
}

/// Finite stand-in for a hypothesis class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBatch {
    models: Vec<Mlp>,
    provenance: Provenance,
}

impl ModelBatch {
    pub fn new(models: Vec<Mlp>, provenance: Provenance) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::config("model batch must not be empty"))?;
        if models.iter().any(|m| m.input_dim() != first.input_dim()) {
            return Err(Error::shape("models in a batch must share the input dimension"));
        }
        Ok(ModelBatch { models, provenance })
    }

    /// `count` freshly initialized networks with seeds derived from `seed`.
    pub fn random(widths: &[usize], activation: Activation, count: usize, seed: u64) -> Result<Self> {
        let models = (0..count)
            .map(|k| Mlp::new(widths, activation, seed::derive_indexed(seed, "model-batch", k as u64)))
            .collect::<Result<Vec<_>>>()?;
        ModelBatch::new(models, Provenance::RandomInit)
    }

    pub fn models(&self) -> &[Mlp] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn homogeneous(&self) -> bool {
        self.models.iter().all(|m| m.same_architecture(&self.models[0]))
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "count": self.models.len(),
            "provenance": self.provenance,
            "widths": self.models.iter().map(|m| m.widths().to_vec()).collect::<Vec<_>>(),
            "activations": self.models.iter().map(|m| m.activation()).collect::<Vec<_>>(),
            "seeds": self.models.iter().map(|m| m.seed()).collect::<Vec<_>>(),
        })
    }
}

pub(crate) fn check_classes(t: &LabeledDataset, s: &LabeledDataset) -> Result<()> {
    if t.class_count() != s.class_count() {
        return Err(Error::Label(format!(
            "T has {} classes, S has {}",
            t.class_count(),
            s.class_count()
        )));
    }
    if t.dim() != s.dim() {
        return Err(Error::shape("T and S differ in dimension"));
    }
    for y in 0..t.class_count() {
        let in_t = t.labels().contains(&y);
        let in_s = s.labels().contains(&y);
        if in_t != in_s {
            return Err(Error::Label(format!("class {y} present in only one of T and S")));
        }
    }
    Ok(())
}

/// Exact maximum over per-model values in batch order.
fn batch_max(values: Vec<f64>) -> f64 {
    values.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-layer feature means of the rows of `x`.
fn layer_means(m: &Mlp, x: &Matrix) -> Result<Vec<Vec<f64>>> {
    let layers = m.widths().len() - 1;
    let mut acc: Vec<Vec<KahanSum>> = m.widths()[1..]
        .iter()
        .map(|&w| vec![KahanSum::default(); w])
        .collect();
    for r in x.iter_rows() {
        let (_, feats) = m.forward_with_features(r)?;
        for (a, f) in acc.iter_mut().zip(feats) {
            for (ai, v) in a.iter_mut().zip(f) {
                ai.add(v);
            }
        }
    }
    debug_assert_eq!(acc.len(), layers);
    let n = x.rows() as f64;
    Ok(acc
        .into_iter()
        .map(|a| a.into_iter().map(|k| k.total() / n).collect())
        .collect())
}

fn present_classes(t: &LabeledDataset) -> Vec<usize> {
    (0..t.class_count()).filter(|y| t.labels().contains(y)).collect()
}

/// Per-model value of [`ipm_feature_stat`].
pub fn ipm_feature_single(m: &Mlp, t: &LabeledDataset, s: &LabeledDataset, layerwise: bool) -> Result<f64> {
    let mut acc = KahanSum::default();
    for y in present_classes(t) {
        let mt = layer_means(m, &t.class_rows(y))?;
        let ms = layer_means(m, &s.class_rows(y))?;
        let range = if layerwise { 0..mt.len() } else { mt.len() - 1..mt.len() };
        for l in range {
            acc.add(sq_dist(&mt[l], &ms[l]));
        }
    }
    Ok(acc.total())
}

/// `max_h Σ_y ‖mean h(T^y) − mean h(S^y)‖²` on output features, or summed
/// over every layer's features when `layerwise`.
pub fn ipm_feature_stat(batch: &ModelBatch, t: &LabeledDataset, s: &LabeledDataset, layerwise: bool) -> Result<f64> {
    check_classes(t, s)?;
    let vals = batch
        .models()
        .par_iter()
        .map(|m| ipm_feature_single(m, t, s, layerwise))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_max(vals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    PerClass,
    /// Class-mean gradients are summed over classes before differencing.
    Contrastive,
}

/// Per-model value of [`gradient_discrepancy`].
pub fn gradient_discrepancy_single(
    m: &Mlp,
    t: &LabeledDataset,
    s: &LabeledDataset,
    mode: GradientMode,
    loss: Loss,
) -> Result<f64> {
    let mut sum_t = vec![0.0; m.param_count()];
    let mut sum_s = vec![0.0; m.param_count()];
    let mut acc = KahanSum::default();
    for y in present_classes(t) {
        let (xt, xs) = (t.class_rows(y), s.class_rows(y));
        let gt = m.mean_param_grad(&xt, &vec![y; xt.rows()], loss)?;
        let gs = m.mean_param_grad(&xs, &vec![y; xs.rows()], loss)?;
        match mode {
            GradientMode::PerClass => acc.add(sq_dist(&gt, &gs)),
            GradientMode::Contrastive => {
                crate::matrix::axpy(&mut sum_t, 1.0, &gt);
                crate::matrix::axpy(&mut sum_s, 1.0, &gs);
            }
        }
    }
    Ok(match mode {
        GradientMode::PerClass => acc.total(),
        GradientMode::Contrastive => sq_dist(&sum_t, &sum_s),
    })
}

/// `max_h Σ_y ‖mean ∇L(h,T^y) − mean ∇L(h,S^y)‖²` (per class) or
/// `max_h ‖Σ_y mean ∇L(h,T^y) − Σ_y mean ∇L(h,S^y)‖²` (contrastive).
pub fn gradient_discrepancy(
    batch: &ModelBatch,
    t: &LabeledDataset,
    s: &LabeledDataset,
    mode: GradientMode,
    loss: Loss,
) -> Result<f64> {
    check_classes(t, s)?;
    let vals = batch
        .models()
        .par_iter()
        .map(|m| gradient_discrepancy_single(m, t, s, mode, loss))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_max(vals))
}

/// Output-feature mean and population variance of the rows of `x`.
fn mean_and_variance(m: &Mlp, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = m.output_features(x)?;
    let mean = f.mean_row();
    let mut var = vec![KahanSum::default(); f.cols()];
    for r in f.iter_rows() {
        for ((v, &a), &mu) in var.iter_mut().zip(r).zip(&mean) {
            v.add((a - mu) * (a - mu));
        }
    }
    let n = f.rows() as f64;
    Ok((mean, var.into_iter().map(|v| v.total() / n).collect()))
}

/// Per-model value of [`moment_discrepancy`].
pub fn moment_discrepancy_single(m: &Mlp, t: &LabeledDataset, s: &LabeledDataset) -> Result<f64> {
    let mut acc = KahanSum::default();
    for y in present_classes(t) {
        let (mt, vt) = mean_and_variance(m, &t.class_rows(y))?;
        let (ms, vs) = mean_and_variance(m, &s.class_rows(y))?;
        acc.add(sq_dist(&mt, &ms));
        acc.add(sq_dist(&vt, &vs));
    }
    Ok(acc.total())
}

/// `max_h Σ_y (‖mean diff‖² + ‖variance diff‖²)` on output features, with
/// population variances.
pub fn moment_discrepancy(batch: &ModelBatch, t: &LabeledDataset, s: &LabeledDataset) -> Result<f64> {
    check_classes(t, s)?;
    let vals = batch
        .models()
        .par_iter()
        .map(|m| moment_discrepancy_single(m, t, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(batch_max(vals))
}

/// Symmetric max–min distance between two finite point sets.
pub fn hausdorff_distance(t: &Matrix, s: &Matrix) -> Result<f64> {
    if t.is_empty() || s.is_empty() {
        return Err(Error::domain("Hausdorff distance needs two nonempty point sets"));
    }
    if t.cols() != s.cols() {
        return Err(Error::shape("point sets differ in dimension"));
    }
    let directed = |a: &Matrix, b: &Matrix| {
        a.iter_rows()
            .map(|x| b.iter_rows().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Ok(directed(t, s).max(directed(s, t)))
}

/// Frequencies for the characteristic discrepancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frequencies {
    Given(Vec<Vec<f64>>),
    /// `count` draws from `N(0, I)`.
    Sampled { count: usize, seed: u64 },
}

impl Frequencies {
    pub fn resolve(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        let out = match self {
            Frequencies::Given(f) => f.clone(),
            Frequencies::Sampled { count, seed } => {
                let mut rng = seed::rng(*seed);
                (0..*count)
                    .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            }
        };
        if out.is_empty() {
            return Err(Error::domain("characteristic discrepancy needs at least one frequency"));
        }
        if out.iter().any(|t| t.len() != dim) {
            return Err(Error::shape("frequency dimension differs from the data"));
        }
        Ok(out)
    }
}

/// Empirical characteristic function `mean e^{i⟨x,t⟩}` as (re, im).
pub fn empirical_cf(x: &Matrix, t: &[f64]) -> (f64, f64) {
    let mut re = KahanSum::default();
    let mut im = KahanSum::default();
    for r in x.iter_rows() {
        let a = dot(r, t);
        re.add(a.cos());
        im.add(a.sin());
    }
    let n = x.rows() as f64;
    (re.total() / n, im.total() / n)
}

/// `max_t |F̂_T(t) − F̂_S(t)|` over the given frequencies.
pub fn characteristic_discrepancy(t: &Matrix, s: &Matrix, freqs: &Frequencies) -> Result<f64> {
    if t.is_empty() || s.is_empty() {
        return Err(Error::domain("characteristic discrepancy needs nonempty point sets"));
    }
    if t.cols() != s.cols() {
        return Err(Error::shape("point sets differ in dimension"));
    }
    let fs = freqs.resolve(t.cols())?;
    Ok(fs
        .iter()
        .map(|f| {
            let (a, b) = empirical_cf(t, f);
            let (c, d) = empirical_cf(s, f);
            (a - c).hypot(b - d)
        })
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdOptions {
    pub loss: Loss,
    /// Uniform points in `[0,1]^n` added to `T` for the value discrepancy.
    pub vd_uniform: usize,
    pub seed: u64,
    pub parameter_discrepancy: bool,
}

impl Default for GdOptions {
    fn default() -> Self {
        GdOptions {
            loss: Loss::CrossEntropy,
            vd_uniform: 256,
            seed: 0,
            parameter_discrepancy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdResult {
    pub gd: f64,
    pub vd: f64,
    pub pd: Option<f64>,
    /// `max_h |L(h,T) − L(h,S)|` over the batch.
    pub dd_loss: f64,
    pub selected_t: usize,
    pub selected_s: usize,
}

fn first_argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Generalization, value and parameter discrepancies for a finite batch.
/// `h*_µ` is the first model in batch order with the smallest empirical loss
/// on `µ`.
pub fn generalization_discrepancy_finite(
    h: &ModelBatch,
    t: &LabeledDataset,
    s: &LabeledDataset,
    opts: &GdOptions,
) -> Result<GdResult> {
    check_classes(t, s)?;
    if opts.parameter_discrepancy && !h.homogeneous() {
        return Err(Error::Architecture(
            "parameter discrepancy needs models of one architecture".into(),
        ));
    }
    let losses = h
        .models()
        .par_iter()
        .map(|m| {
            Ok((
                m.loss(t.features(), t.labels(), opts.loss)?,
                m.loss(s.features(), s.labels(), opts.loss)?,
            ))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let lt: Vec<f64> = losses.iter().map(|p| p.0).collect();
    let ls: Vec<f64> = losses.iter().map(|p| p.1).collect();
    if lt.iter().chain(&ls).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite loss in generalization discrepancy".into()));
    }
    let it = first_argmin(&lt);
    let is = first_argmin(&ls);
    let gd = (lt[is] - lt[it]).abs();
    let dd_loss = lt.iter().zip(&ls).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let (mt, ms) = (&h.models()[it], &h.models()[is]);
    let mut vd: f64 = 0.0;
    if it != is {
        let mut rng = seed::rng(opts.seed);
        let n = t.dim();
        let uniform: Vec<Vec<f64>> = (0..opts.vd_uniform)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        for x in t.features().iter_rows().chain(uniform.iter().map(|v| v.as_slice())) {
            let a = mt.forward(x)?;
            let b = ms.forward(x)?;
            for (p, q) in a.iter().zip(&b) {
                vd = vd.max((p - q).abs());
            }
        }
    }
    let pd = if opts.parameter_discrepancy {
        Some(crate::models::parameter_distance(mt, ms)?)
    } else {
        None
    };
    Ok(GdResult {
        gd,
        vd,
        pd,
        dd_loss,
        selected_t: it,
        selected_s: is,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    DdFeature,
    DdGradient,
    DdMoment,
    Mmd,
    W1,
    Hausdorff,
    Cd,
    /// GD together with VD, PD and the loss discrepancy.
    Gd,
}

impl Metric {
    pub fn all() -> Vec<Metric> {
        vec![
            Metric::DdFeature,
            Metric::DdGradient,
            Metric::DdMoment,
            Metric::Mmd,
            Metric::W1,
            Metric::Hausdorff,
            Metric::Cd,
            Metric::Gd,
        ]
    }

    pub fn point_set() -> Vec<Metric> {
        vec![Metric::Mmd, Metric::W1, Metric::Hausdorff, Metric::Cd]
    }

    pub fn needs_models(self) -> bool {
        matches!(
            self,
            Metric::DdFeature | Metric::DdGradient | Metric::DdMoment | Metric::Gd
        )
    }

    pub fn parse(name: &str) -> Result<Metric> {
        Ok(match name.trim() {
            "dd_feature" => Metric::DdFeature,
            "dd_gradient" => Metric::DdGradient,
            "dd_moment" => Metric::DdMoment,
            "mmd" => Metric::Mmd,
            "w1" => Metric::W1,
            "hausdorff" => Metric::Hausdorff,
            "cd" => Metric::Cd,
            "gd" => Metric::Gd,
            other => return Err(Error::config(format!("unknown metric '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub metrics: Vec<Metric>,
    /// Kernel for MMD; `None` uses a Gaussian with the median-heuristic
    /// bandwidth computed on `T`.
    pub kernel: Option<KernelSpec>,
    pub cd_frequencies: usize,
    pub cd_seed: u64,
    pub loss: Loss,
    pub layerwise: bool,
    pub gradient_mode: GradientMode,
    pub vd_uniform: usize,
    pub vd_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            metrics: Metric::all(),
            kernel: None,
            cd_frequencies: 128,
            cd_seed: 0,
            loss: Loss::CrossEntropy,
            layerwise: false,
            gradient_mode: GradientMode::PerClass,
            vd_uniform: 256,
            vd_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyCheck {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl HierarchyCheck {
    fn new(name: &str, lhs: f64, rhs: f64) -> Self {
        HierarchyCheck {
            name: name.into(),
            lhs,
            rhs,
            satisfied: lhs <= rhs + 1e-9,
        }
    }
}

/// Named discrepancy values (absent when not computed), bound checks and
/// every hyperparameter that affects a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DiscrepancyReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dd_feature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dd_gradient: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dd_moment: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hausdorff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pd: Option<f64>,
    /// `max_h |L(h,T) − L(h,S)|`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dd_loss: Option<f64>,
    /// Largest mean gap over the characteristic test functions and the batch
    /// output coordinates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dd_cf: Option<f64>,
    pub hierarchy_checks: Vec<HierarchyCheck>,
    pub hyperparameters: serde_json::Value,
}

impl DiscrepancyReport {
    pub fn all_satisfied(&self) -> bool {
        self.hierarchy_checks.iter().all(|c| c.satisfied)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Named values present in the report, in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        [
            ("dd_feature", self.dd_feature),
            ("dd_gradient", self.dd_gradient),
            ("dd_moment", self.dd_moment),
            ("mmd", self.mmd),
            ("w1", self.w1),
            ("hausdorff", self.hausdorff),
            ("cd", self.cd),
            ("gd", self.gd),
            ("vd", self.vd),
            ("pd", self.pd),
            ("dd_loss", self.dd_loss),
            ("dd_cf", self.dd_cf),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{name} is not finite")))
    }
}

/// Computes the requested discrepancies on `(T, S)` and records the bound
/// checks `gd ≤ 2·dd_loss` and `cd ≤ dd_cf`. Point-set metrics compare the
/// pooled sets; model-based metrics need a batch.
pub fn hierarchy_report(
    t: &LabeledDataset,
    s: &LabeledDataset,
    h: Option<&ModelBatch>,
    opts: &ReportOptions,
) -> Result<DiscrepancyReport> {
    check_classes(t, s)?;
    let mut r = DiscrepancyReport::default();
    let mut hp = serde_json::Map::new();
    let wants = |m: Metric| opts.metrics.contains(&m);
    let batch = || {
        h.ok_or_else(|| Error::config("model-based metrics need a model batch"))
    };
    if opts.metrics.iter().any(|m| m.needs_models()) {
        hp.insert("model_batch".into(), batch()?.describe());
        hp.insert("loss".into(), serde_json::to_value(opts.loss)?);
    }
    let (tx, sx) = (t.features(), s.features());
    if wants(Metric::DdFeature) {
        r.dd_feature = Some(finite("dd_feature", ipm_feature_stat(batch()?, t, s, opts.layerwise)?)?);
        hp.insert("layerwise".into(), opts.layerwise.into());
    }
    if wants(Metric::DdGradient) {
        r.dd_gradient = Some(finite(
            "dd_gradient",
            gradient_discrepancy(batch()?, t, s, opts.gradient_mode, opts.loss)?,
        )?);
        hp.insert("gradient_mode".into(), serde_json::to_value(opts.gradient_mode)?);
    }
    if wants(Metric::DdMoment) {
        r.dd_moment = Some(finite("dd_moment", moment_discrepancy(batch()?, t, s)?)?);
    }
    if wants(Metric::Mmd) {
        let kernel = match &opts.kernel {
            Some(k) => k.clone(),
            None => {
                let (k, sigma) = median_gaussian(tx)?;
                hp.insert("kernel_bandwidth_sigma".into(), sigma.into());
                k
            }
        };
        hp.insert("kernel".into(), kernel.describe());
        r.mmd = Some(finite("mmd", mmd_squared(&kernel, tx, sx)?)?.max(0.0));
    }
    if wants(Metric::W1) {
        r.w1 = Some(finite("w1", wasserstein1(tx, sx)?)?);
    }
    if wants(Metric::Hausdorff) {
        r.hausdorff = Some(finite("hausdorff", hausdorff_distance(tx, sx)?)?);
    }
    if wants(Metric::Cd) {
        let freqs = Frequencies::Sampled {
            count: opts.cd_frequencies,
            seed: opts.cd_seed,
        };
        let cd = finite("cd", characteristic_discrepancy(tx, sx, &freqs)?)?;
        let mut dd_cf = cd;
        if let Some(b) = h {
            for m in b.models() {
                let ft = m.output_features(tx)?.mean_row();
                let fs = m.output_features(sx)?.mean_row();
                for (a, c) in ft.iter().zip(&fs) {
                    dd_cf = dd_cf.max((a - c).abs());
                }
            }
        }
        r.cd = Some(cd);
        r.dd_cf = Some(dd_cf);
        r.hierarchy_checks.push(HierarchyCheck::new("cd_le_dd_cf", cd, dd_cf));
        hp.insert("cd_frequencies".into(), opts.cd_frequencies.into());
        hp.insert("cd_seed".into(), opts.cd_seed.into());
    }
    if wants(Metric::Gd) {
        let b = batch()?;
        let g = generalization_discrepancy_finite(
            b,
            t,
            s,
            &GdOptions {
                loss: opts.loss,
                vd_uniform: opts.vd_uniform,
                seed: opts.vd_seed,
                parameter_discrepancy: b.homogeneous(),
            },
        )?;
        r.gd = Some(g.gd);
        r.vd = Some(g.vd);
        r.pd = g.pd;
        r.dd_loss = Some(g.dd_loss);
        r.hierarchy_checks
            .push(HierarchyCheck::new("gd_le_2_dd_loss", g.gd, 2.0 * g.dd_loss));
        hp.insert("vd_sample".into(), serde_json::json!({
            "real_rows": t.len(), "uniform": opts.vd_uniform, "seed": opts.vd_seed
        }));
    }
    r.hyperparameters = serde_json::Value::Object(hp);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[&[f64]], labels: &[usize], c: usize) -> LabeledDataset {
        LabeledDataset::new(Matrix::from_rows(rows).unwrap(), labels.to_vec(), c).unwrap()
    }

    #[test]
    fn identity_feature_examples() {
        let batch = ModelBatch::new(vec![Mlp::identity(2)], Provenance::Pretrained).unwrap();
        let t = ds(&[&[-1.0, 0.0], &[1.0, 0.0]], &[0, 0], 1);
        let s = ds(&[&[1.0, 0.0]], &[0], 1);
        assert!((ipm_feature_stat(&batch, &t, &s, false).unwrap() - 1.0).abs() <= 1e-15);
        assert_eq!(ipm_feature_stat(&batch, &t, &t, true).unwrap(), 0.0);
        let b1 = ModelBatch::new(vec![Mlp::identity(1)], Provenance::Pretrained).unwrap();
        let t = ds(&[&[0.0], &[2.0]], &[0, 0], 1);
        let s = ds(&[&[1.0], &[1.0]], &[0, 0], 1);
        assert_eq!(ipm_feature_stat(&b1, &t, &s, false).unwrap(), 0.0);
        assert!((moment_discrepancy(&b1, &t, &s).unwrap() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn class_mismatch_is_label_error() {
        let batch = ModelBatch::new(vec![Mlp::identity(1)], Provenance::Pretrained).unwrap();
        let t = ds(&[&[0.0], &[1.0]], &[0, 1], 2);
        let s = ds(&[&[0.0]], &[0], 1);
        assert!(matches!(ipm_feature_stat(&batch, &t, &s, false), Err(Error::Label(_))));
    }

    #[test]
    fn hausdorff_and_cd_examples() {
        let t = Matrix::column(&[0.0, 4.0, 10.0]);
        let s = Matrix::column(&[4.0]);
        assert_eq!(hausdorff_distance(&t, &s).unwrap(), 6.0);
        let pi = std::f64::consts::PI;
        let f = Frequencies::Given(vec![vec![1.0]]);
        let cd = characteristic_discrepancy(&Matrix::column(&[0.0]), &Matrix::column(&[pi]), &f).unwrap();
        assert!((cd - 2.0).abs() <= 1e-12);
        assert!(matches!(
            characteristic_discrepancy(&t, &s, &Frequencies::Given(vec![])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn single_model_batch_has_zero_gd() {
        let b = ModelBatch::random(&[2, 4, 2], Activation::Relu, 1, 3).unwrap();
        let t = ds(&[&[0.1, 0.2], &[0.8, 0.9]], &[0, 1], 2);
        let s = ds(&[&[0.9, 0.1], &[0.2, 0.7]], &[0, 1], 2);
        let g = generalization_discrepancy_finite(&b, &t, &s, &GdOptions::default()).unwrap();
        assert_eq!(g.gd, 0.0);
        assert_eq!(g.vd, 0.0);
        assert_eq!(g.pd, Some(0.0));
    }

    #[test]
    fn heterogeneous_pd_is_architecture_error() {
        let models = vec![
            Mlp::new(&[2, 3, 2], Activation::Relu, 0).unwrap(),
            Mlp::new(&[2, 5, 2], Activation::Relu, 1).unwrap(),
        ];
        let b = ModelBatch::new(models, Provenance::RandomInit).unwrap();
        let t = ds(&[&[0.1, 0.2], &[0.8, 0.9]], &[0, 1], 2);
        assert!(matches!(
            generalization_discrepancy_finite(&b, &t, &t, &GdOptions::default()),
            Err(Error::Architecture(_))
        ));
    }
}
