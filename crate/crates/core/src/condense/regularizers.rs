//! Auxiliary losses that can be added to any gradient-based objective.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cosine, dist, dot, KahanSum, Matrix};
use crate::models::{Mlp, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerId {
    Intra,
    Inter,
    Rep,
    Div,
    Con,
    Cos,
    Dis,
    Proj,
}

impl RegularizerId {
    pub fn all() -> [RegularizerId; 8] {
        use RegularizerId::*;
        [Intra, Inter, Rep, Div, Con, Cos, Dis, Proj]
    }

    pub fn name(self) -> &'static str {
        match self {
            RegularizerId::Intra => "intra",
            RegularizerId::Inter => "inter",
            RegularizerId::Rep => "rep",
            RegularizerId::Div => "div",
            RegularizerId::Con => "con",
            RegularizerId::Cos => "cos",
            RegularizerId::Dis => "dis",
            RegularizerId::Proj => "proj",
        }
    }

    pub fn needs_models(self) -> bool {
        !matches!(self, RegularizerId::Rep | RegularizerId::Div)
    }

    pub fn needs_two_models(self) -> bool {
        matches!(self, RegularizerId::Con | RegularizerId::Cos)
    }

    /// `tau` is read by these terms (temperature or margin).
    pub fn uses_tau(self) -> bool {
        matches!(self, RegularizerId::Intra | RegularizerId::Inter | RegularizerId::Con)
    }

    /// Whether the value depends on the synthetic points.
    pub fn depends_on_synthetic(self) -> bool {
        self != RegularizerId::Proj
    }
}

/// A weighted regularizer inside a method config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerTerm {
    pub id: RegularizerId,
    pub weight: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Epochs of the expert run whose snapshots span the subspace of `proj`.
    #[serde(default = "default_proj_epochs")]
    pub proj_epochs: usize,
}

fn default_tau() -> f64 {
    1.0
}

fn default_proj_epochs() -> usize {
    10
}

impl RegularizerTerm {
    pub fn new(id: RegularizerId, weight: f64) -> Self {
        RegularizerTerm {
            id,
            weight,
            tau: default_tau(),
            proj_epochs: default_proj_epochs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() {
            return Err(Error::config(format!("{} weight must be finite", self.id.name())));
        }
        if self.id.uses_tau() && !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config(format!("{} needs tau > 0, got {}", self.id.name(), self.tau)));
        }
        if self.id == RegularizerId::Proj && self.proj_epochs == 0 {
            return Err(Error::config("proj needs proj_epochs >= 1"));
        }
        Ok(())
    }
}

/// Everything a regularizer may read. Feature maps `h` are last-hidden-layer
/// features of `models` (the first model where one suffices).
#[derive(Debug, Clone, Copy, Default)]
pub struct RegularizerContext<'a> {
    pub models: &'a [Mlp],
    pub synthetic: Option<(&'a Matrix, &'a [usize])>,
    pub real: Option<(&'a Matrix, &'a [usize])>,
    pub class_count: usize,
    /// Feature-space class centers `c(y)`; defaults to the mean feature of
    /// the real class.
    pub class_centers: Option<&'a [Vec<f64>]>,
    pub trajectory: Option<&'a Trajectory>,
    /// Parameter vector for `proj`; the models' parameters otherwise.
    pub theta: Option<&'a [f64]>,
}

fn missing(what: &str, id: RegularizerId) -> Error {
    Error::Context(format!("{} needs {what}", id.name()))
}

fn rows_of(x: &Matrix, labels: &[usize], y: usize) -> Vec<usize> {
    (0..x.rows()).filter(|&i| labels[i] == y).collect()
}

fn features(model: &Mlp, x: &Matrix, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    idx.iter().map(|&i| model.penultimate(x.row(i))).collect()
}

fn mean_vec(v: &[Vec<f64>]) -> Vec<f64> {
    let n = v.first().map_or(0, |r| r.len());
    let mut acc = vec![KahanSum::default(); n];
    for r in v {
        for (a, &x) in acc.iter_mut().zip(r) {
            a.add(x);
        }
    }
    acc.iter().map(|a| a.total() / v.len().max(1) as f64).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn regularizer_eval(term: &RegularizerTerm, ctx: &RegularizerContext) -> Result<f64> {
    let id = term.id;
    let tau = term.tau;
    let synthetic = || ctx.synthetic.ok_or_else(|| missing("the synthetic set", id));
    let real = || ctx.real.ok_or_else(|| missing("the real set", id));
    let model = || ctx.models.first().ok_or_else(|| missing("a model", id));
    match id {
        RegularizerId::Intra => {
            let (s, sl) = synthetic()?;
            let h = model()?;
            let mut acc = KahanSum::default();
            for y in 0..ctx.class_count {
                let idx = rows_of(s, sl, y);
                if idx.is_empty() {
                    continue;
                }
                let center = match ctx.class_centers {
                    Some(c) => c.get(y).cloned().ok_or_else(|| missing("a center per class", id))?,
                    None => {
                        let (t, tl) = real()?;
                        let tidx = rows_of(t, tl, y);
                        if tidx.is_empty() {
                            return Err(Error::EmptyClass(y));
                        }
                        mean_vec(&features(h, t, &tidx)?)
                    }
                };
                let f = features(h, s, &idx)?;
                for i in 0..f.len() {
                    let pos = dot(&f[i], &center) / tau;
                    let mut all = vec![pos];
                    all.extend((0..f.len()).filter(|&j| j != i).map(|j| dot(&f[i], &f[j]) / tau));
                    acc.add(log_sum_exp(&all) - pos);
                }
            }
            Ok(acc.total() / s.rows().max(1) as f64)
        }
        RegularizerId::Inter => {
            let (s, sl) = synthetic()?;
            let h = model()?;
            let means: Vec<Option<Vec<f64>>> = (0..ctx.class_count)
                .map(|y| {
                    let idx = rows_of(s, sl, y);
                    if idx.is_empty() {
                        Ok(None)
                    } else {
                        Ok(Some(mean_vec(&features(h, s, &idx)?)))
                    }
                })
                .collect::<Result<_>>()?;
            let mut acc = KahanSum::default();
            for (a, ma) in means.iter().enumerate() {
                for (b, mb) in means.iter().enumerate() {
                    if let (true, Some(ma), Some(mb)) = (a != b, ma, mb) {
                        acc.add((tau - dist(ma, mb)).max(0.0));
                    }
                }
            }
            Ok(acc.total())
        }
        RegularizerId::Rep => {
            let (s, _) = synthetic()?;
            let (t, _) = real()?;
            if t.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let mut acc = KahanSum::default();
            for x in s.iter_rows() {
                let m = t.iter_rows().map(|r| cosine(x, r)).fold(f64::INFINITY, f64::min);
                acc.add(-m);
            }
            Ok(acc.total() / s.rows().max(1) as f64)
        }
        RegularizerId::Div => {
            let (s, _) = synthetic()?;
            if s.rows() < 2 {
                return Err(missing("at least two synthetic points", id));
            }
            let mut acc = KahanSum::default();
            for i in 0..s.rows() {
                let m = (0..s.rows())
                    .filter(|&j| j != i)
                    .map(|j| cosine(s.row(i), s.row(j)))
                    .fold(f64::NEG_INFINITY, f64::max);
                acc.add(m);
            }
            Ok(acc.total() / s.rows() as f64)
        }
        RegularizerId::Con | RegularizerId::Cos => {
            let (s, sl) = synthetic()?;
            let hs = ctx.models;
            if hs.len() < 2 {
                return Err(missing("at least two models", id));
            }
            let nh = hs.len() as f64;
            let mut total = KahanSum::default();
            for y in 0..ctx.class_count {
                let idx = rows_of(s, sl, y);
                if idx.is_empty() {
                    continue;
                }
                let f: Vec<Vec<Vec<f64>>> = hs.iter().map(|m| features(m, s, &idx)).collect::<Result<_>>()?;
                if f.iter().any(|fm| fm[0].len() != f[0][0].len()) {
                    return Err(Error::Architecture("models expose features of different widths".into()));
                }
                let mut acc = KahanSum::default();
                for j in 0..hs.len() {
                    for k in 0..hs.len() {
                        if j == k {
                            continue;
                        }
                        for i in 0..idx.len() {
                            if id == RegularizerId::Cos {
                                acc.add(cosine(&f[j][i], &f[k][i]));
                            } else {
                                let logits: Vec<f64> =
                                    (0..idx.len()).map(|t| dot(&f[j][i], &f[k][t]) / tau).collect();
                                acc.add(-(logits[i] - log_sum_exp(&logits)));
                            }
                        }
                    }
                }
                total.add(acc.total() / (nh * nh * idx.len() as f64));
            }
            Ok(total.total())
        }
        RegularizerId::Dis => {
            let (s, sl) = synthetic()?;
            let (t, tl) = real()?;
            let h = model()?;
            let c = ctx.class_count;
            let mut means = Vec::with_capacity(c);
            for y in 0..c {
                let idx = rows_of(s, sl, y);
                if idx.is_empty() {
                    return Err(Error::EmptyClass(y));
                }
                means.push(mean_vec(&features(h, s, &idx)?));
            }
            let mut acc = KahanSum::default();
            for y in 0..c {
                let tidx = rows_of(t, tl, y);
                if tidx.is_empty() {
                    return Err(Error::EmptyClass(y));
                }
                let mut inner = KahanSum::default();
                for f in features(h, t, &tidx)? {
                    let o: Vec<f64> = means.iter().map(|m| dot(&f, m)).collect();
                    inner.add(o[y] - log_sum_exp(&o));
                }
                acc.add(-inner.total() / tidx.len() as f64);
            }
            Ok(acc.total() / c as f64)
        }
        RegularizerId::Proj => {
            let traj = ctx.trajectory.ok_or_else(|| missing("a trajectory", id))?;
            match ctx.theta {
                Some(theta) => projection_residual(traj, theta),
                None if !ctx.models.is_empty() => {
                    let mut acc = KahanSum::default();
                    for m in ctx.models {
                        acc.add(projection_residual(traj, m.params())?);
                    }
                    Ok(acc.total() / ctx.models.len() as f64)
                }
                None => Err(missing("parameters", id)),
            }
        }
    }
}

/// `‖θ − Proj(θ)‖₁` for the least-squares projection onto the span of the
/// trajectory snapshots.
pub fn projection_residual(traj: &Trajectory, theta: &[f64]) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::Context("proj needs a nonempty trajectory".into()));
    }
    let p = theta.len();
    if traj.snapshots.iter().any(|s| s.len() != p) {
        return Err(Error::Architecture("snapshot length differs from the parameter vector".into()));
    }
    let a = DMatrix::from_fn(p, traj.len(), |i, j| traj.snapshots[j][i]);
    let b = DVector::from_column_slice(theta);
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * p.max(traj.len()) as f64;
    let coef = svd
        .solve(&b, tol)
        .map_err(|e| Error::LinearAlgebra(e.to_string()))?;
    let proj = a * coef;
    Ok(theta.iter().zip(proj.iter()).map(|(x, q)| (x - q).abs()).sum())
}
