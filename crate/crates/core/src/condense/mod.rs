//! Condensation: outer-loop optimization of a synthetic set against a real
//! one, plus coreset selectors, regularizers and the private and robust
//! variants.

pub mod bilevel;
pub mod config;
pub mod coreset;
pub mod krr;
mod objectives;
pub mod privacy;
pub mod regularizers;

use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use bilevel::{
    bptt_outer_gradient, central_difference, cig_ridge, gd_path, trajectory_mismatch, unroll, unrolled_outer, OuterLoss,
};
pub use config::{BilevelConfig, KernelConfig, Method, MethodConfig, ModelConfig, ModelSource, Optimizer, Variant};
pub use coreset::{kcenter_covering, kcenter_exact, kcenter_greedy, kmeans_coreset, Cover, KMeans};
pub use krr::{krr_fit, krr_fit_targets, krr_loss_and_grad, KrrLoss, KrrPredictor};
pub use privacy::{dp_noise_calibration, PrivacyLog};
pub use regularizers::{regularizer_eval, projection_residual, RegularizerContext, RegularizerId, RegularizerTerm};

use crate::data::{LabeledDataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::kernels::{median_gaussian, KernelSpec};
use crate::matrix::{norm, KahanSum, Matrix};
use crate::models::{sgd_train, Loss, Mlp, PgdConfig, TrainConfig, Trajectory};
use crate::seed;
use crate::spaces::{LinearAutoencoder, Regime};
use objectives::{
    curvature_cache, curvature_penalty, kernel_stat, kernel_value_grad, model_value_grad, real_stats, AugOp,
    AugPipeline, CurvatureCache, DpGrad, KernelStat, Side, StatKind, TStat, CURV_SUBSAMPLE,
};

/// One row of the per-step log, evaluated before that step's update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Method loss plus every weighted term.
    pub objective: f64,
    pub method: f64,
    /// Values in the order of [`StepLog::terms`]. Regularizer columns are
    /// unweighted; penalty columns already include their weight.
    pub terms: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub terms: Vec<String>,
    pub records: Vec<StepRecord>,
}

impl StepLog {
    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    /// Share of steps whose objective did not increase over the previous one.
    pub fn nonincreasing_fraction(&self) -> f64 {
        let o = self.objectives();
        if o.len() < 2 {
            return 1.0;
        }
        o.windows(2).filter(|w| w[1] <= w[0]).count() as f64 / (o.len() - 1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,objective,method");
        for t in &self.terms {
            out.push(',');
            out.push_str(t);
        }
        out.push_str(",grad_norm\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}", r.step, r.objective, r.method));
            for v in &r.terms {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{}\n", r.grad_norm));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Parses the output of [`StepLog::to_csv`].
    pub fn from_csv(text: &str) -> Result<StepLog> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let w = header.len();
        if w < 4 || header[0] != "step" || header[1] != "objective" || header[2] != "method" || header[w - 1] != "grad_norm" {
            return Err(Error::Parse {
                row: 0,
                message: "header must be step,objective,method,...,grad_norm".into(),
            });
        }
        let mut records = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j).and_then(|v| v.trim().parse().ok()).ok_or_else(|| Error::Parse {
                    row,
                    message: format!("field {j} is not a number"),
                })
            };
            records.push(StepRecord {
                step: num(0)? as usize,
                objective: num(1)?,
                method: num(2)?,
                terms: (3..w - 1).map(num).collect::<Result<_>>()?,
                grad_norm: num(w - 1)?,
            });
        }
        Ok(StepLog {
            terms: header[3..w - 1].to_vec(),
            records,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CondenseOutput {
    pub synthetic: SyntheticDataset,
    pub log: StepLog,
    pub privacy: Option<PrivacyLog>,
    /// Final latent variable when the regime optimizes in latent space.
    pub latent: Option<Matrix>,
    /// Final inner step size of the unrolled flavors.
    pub inner_lr: Option<f64>,
    /// Indices into each real class chosen by the coreset methods.
    pub coreset: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BilevelFlavor {
    Bptt,
    Trajectory,
    CigRidge,
    Robdc,
    Curvdc,
}

impl BilevelFlavor {
    pub fn method(self) -> Method {
        match self {
            BilevelFlavor::Bptt => Method::Bptt,
            BilevelFlavor::Trajectory => Method::Trajectory,
            BilevelFlavor::CigRidge => Method::CigRidge,
            BilevelFlavor::Robdc => Method::Robdc,
            BilevelFlavor::Curvdc => Method::Curvdc,
        }
    }
}

/// Runs the configured method in the input space.
pub fn condense(cfg: &MethodConfig, t: &LabeledDataset, s0: &SyntheticDataset) -> Result<CondenseOutput> {
    condense_with_encoder(cfg, t, s0, None)
}

/// Kernel ridge regression condensation; `cfg.method` must be `krr`.
pub fn condense_krr(cfg: &MethodConfig, t: &LabeledDataset, s0: &SyntheticDataset) -> Result<CondenseOutput> {
    if cfg.method != Method::Krr {
        return Err(Error::config("condense_krr needs method krr"));
    }
    condense(cfg, t, s0)
}

/// Runs a bilevel flavor, overriding `cfg.method`.
pub fn condense_bilevel(
    cfg: &MethodConfig,
    t: &LabeledDataset,
    s0: &SyntheticDataset,
    flavor: BilevelFlavor,
) -> Result<CondenseOutput> {
    let mut c = cfg.clone();
    c.method = flavor.method();
    condense(&c, t, s0)
}

/// Runs the configured method; regimes other than `input_input` need the
/// encoder.
pub fn condense_with_encoder(
    cfg: &MethodConfig,
    t: &LabeledDataset,
    s0: &SyntheticDataset,
    ae: Option<&LinearAutoencoder>,
) -> Result<CondenseOutput> {
    cfg.validate()?;
    if curvature_rho(cfg).is_some() && cfg.augmentations().next().is_some() {
        return Err(Error::config("curvature cannot be combined with augmentation variants"));
    }
    if s0.class_count() != t.class_count() {
        return Err(Error::Label(format!(
            "synthetic set has {} classes, real set {}",
            s0.class_count(),
            t.class_count()
        )));
    }
    if s0.dim() != t.dim() {
        return Err(Error::shape(format!(
            "synthetic rows have {} features, real rows {}",
            s0.dim(),
            t.dim()
        )));
    }
    if t.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let space = Space::new(cfg.regime, ae, t.dim())?;
    if cfg.method.is_coreset() {
        return run_coreset(cfg, t, s0);
    }
    Runner::new(cfg, t, s0, space)?.run()
}

/// Loss of a single model for the statistic-matching methods (dm, gm,
/// moment, sam) and its gradient in every synthetic row.
pub fn matching_objective(
    method: Method,
    layerwise: bool,
    model: &Mlp,
    t: &LabeledDataset,
    s: &Matrix,
    sl: &[usize],
) -> Result<(f64, Matrix)> {
    let kind = match method {
        Method::Dm => StatKind::Dm { layerwise },
        Method::Gm => StatKind::Gm { contrastive: false },
        Method::Moment => StatKind::Moment,
        Method::Sam => StatKind::Sam,
        other => {
            return Err(Error::config(format!("{} is not a statistic-matching method", other.name())));
        }
    };
    matching_with_kind(kind, model, t, s, sl)
}

/// Gradient-matching loss of one model, per class or with the class
/// gradients summed first. Classes without synthetic rows are skipped.
pub fn gm_objective(
    contrastive: bool,
    model: &Mlp,
    t: &LabeledDataset,
    s: &Matrix,
    sl: &[usize],
) -> Result<(f64, Matrix)> {
    matching_with_kind(StatKind::Gm { contrastive }, model, t, s, sl)
}

fn matching_with_kind(
    kind: StatKind,
    model: &Mlp,
    t: &LabeledDataset,
    s: &Matrix,
    sl: &[usize],
) -> Result<(f64, Matrix)> {
    if s.rows() != sl.len() {
        return Err(Error::shape("synthetic rows and labels differ in length"));
    }
    let c = t.class_count();
    if let Some(&y) = sl.iter().find(|&&y| y >= c) {
        return Err(Error::Label(format!("synthetic label {y} outside 0..{c}")));
    }
    let t_classes: Vec<Matrix> = (0..c).map(|y| t.class_rows(y)).collect();
    let s_idx = class_index(sl, c);
    let s_classes: Vec<Matrix> = s_idx.iter().map(|i| s.select_rows(i)).collect();
    let stats = real_stats(kind, model, &t_classes, None)?;
    let (v, g) = model_value_grad(kind, model, &stats, &s_classes)?;
    Ok((v, scatter(&s_idx, s.rows(), g, s.cols())))
}

fn curvature_rho(cfg: &MethodConfig) -> Option<f64> {
    match cfg.variant("curvature") {
        Some(Variant::Curvature { rho }) => Some(*rho),
        _ => None,
    }
}

/// Change of variable between the optimized points and the matching space.
struct Space<'a> {
    regime: Regime,
    ae: Option<&'a LinearAutoencoder>,
}

impl<'a> Space<'a> {
    fn new(regime: Regime, ae: Option<&'a LinearAutoencoder>, dim: usize) -> Result<Self> {
        if regime != Regime::InputInput {
            let ae = ae.ok_or_else(|| Error::Context(format!("regime {regime:?} needs an autoencoder")))?;
            if ae.input_dim() != dim {
                return Err(Error::shape("autoencoder input dimension differs from the data"));
            }
        }
        Ok(Space { regime, ae })
    }

    fn ae(&self) -> &LinearAutoencoder {
        self.ae.expect("checked in Space::new")
    }

    fn map_rows(&self, x: &Matrix, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(f).collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    }

    fn real(&self, t: &Matrix) -> Result<Matrix> {
        if self.regime.matches_latent() {
            self.map_rows(t, |r| self.ae().encode(r))
        } else {
            Ok(t.clone())
        }
    }

    fn initial(&self, s: &Matrix) -> Result<Matrix> {
        if self.regime.optimizes_latent() {
            self.map_rows(s, |r| self.ae().encode(r))
        } else {
            Ok(s.clone())
        }
    }

    fn to_matching(&self, v: &Matrix) -> Result<Matrix> {
        match self.regime {
            Regime::InputInput | Regime::LatentLatent => Ok(v.clone()),
            Regime::InputLatent => self.map_rows(v, |r| self.ae().decode(r)),
            Regime::LatentInput => self.map_rows(v, |r| self.ae().encode(r)),
        }
    }

    fn pullback(&self, g: &Matrix) -> Result<Matrix> {
        match self.regime {
            Regime::InputInput | Regime::LatentLatent => Ok(g.clone()),
            Regime::InputLatent => self.map_rows(g, |r| Ok(self.ae().decode_vjp(r))),
            Regime::LatentInput => self.map_rows(g, |r| Ok(self.ae().encode_vjp(r))),
        }
    }

    fn to_input(&self, v: &Matrix) -> Result<Matrix> {
        if self.regime.optimizes_latent() {
            self.map_rows(v, |r| self.ae().decode(r))
        } else {
            Ok(v.clone())
        }
    }
}

fn class_index(labels: &[usize], classes: usize) -> Vec<Vec<usize>> {
    let mut idx = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        idx[y].push(i);
    }
    idx
}

fn run_coreset(cfg: &MethodConfig, t: &LabeledDataset, s0: &SyntheticDataset) -> Result<CondenseOutput> {
    let c = t.class_count();
    let m = s0.per_class();
    let tidx = class_index(t.labels(), c);
    let mut features = Matrix::zeros(m * c, t.dim());
    let mut labels = Vec::with_capacity(m * c);
    let mut chosen = Vec::with_capacity(c);
    let mut total = KahanSum::default();
    for (y, idx) in tidx.iter().enumerate() {
        if idx.is_empty() {
            return Err(Error::EmptyClass(y));
        }
        let ty = t.features().select_rows(idx);
        let rows = match cfg.method {
            Method::Kcenter => {
                let cover = kcenter_covering(&ty, m)?;
                total.add(cover.radius);
                chosen.push(cover.indices.clone());
                ty.select_rows(&cover.indices)
            }
            _ => {
                let km = kmeans_coreset(&ty, m, cfg.kmeans_iters, seed::derive_indexed(cfg.seed, "kmeans", y as u64))?;
                total.add(km.final_inertia());
                km.centers
            }
        };
        for r in rows.iter_rows() {
            features.row_mut(labels.len()).copy_from_slice(r);
            labels.push(y);
        }
    }
    let mut synthetic = SyntheticDataset::new(features, labels, c, m, format!("condense:{}", cfg.method.name()))?;
    synthetic.seed = Some(cfg.seed);
    synthetic.scaling = s0.scaling.clone();
    let v = total.total();
    Ok(CondenseOutput {
        synthetic,
        log: StepLog {
            terms: Vec::new(),
            records: vec![StepRecord {
                step: 0,
                objective: v,
                method: v,
                terms: Vec::new(),
                grad_norm: 0.0,
            }],
        },
        privacy: None,
        latent: None,
        inner_lr: None,
        coreset: (cfg.method == Method::Kcenter).then_some(chosen),
    })
}

struct Adam {
    kind: Optimizer,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        Adam {
            kind,
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, x: &mut [f64], g: &[f64]) {
        match self.kind {
            Optimizer::Sgd => {
                for (xi, gi) in x.iter_mut().zip(g) {
                    *xi -= self.lr * gi;
                }
            }
            Optimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                for i in 0..x.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * g[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * g[i] * g[i];
                    x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
    }
}

/// Result of one objective evaluation in the matching space.
struct Eval {
    method: f64,
    penalties: Vec<f64>,
    grad: Matrix,
    eta_grad: Option<f64>,
}

enum Engine {
    Matching(MatchingState),
    Kernel(KernelState),
    Krr(KrrState),
    Bilevel(BilevelState),
}

struct MatchingState {
    kind: StatKind,
    pipeline: Option<AugPipeline>,
    proxy: Option<(usize, usize)>,
    sources: Vec<Matrix>,
    stats: Vec<Vec<TStat>>,
    dirty: bool,
    dp: Option<DpGrad>,
    recomputes: u64,
    curvature: Option<(f64, Vec<CurvatureCache>)>,
}

struct KernelState {
    spec: KernelSpec,
    proxy: Option<(usize, usize)>,
    sources: Vec<Matrix>,
    stats: Vec<KernelStat>,
    merf_sigma: Option<f64>,
}

struct KrrState {
    spec: KernelSpec,
    robust: Option<(f64, usize)>,
}

struct BilevelState {
    method: Method,
    start: Option<Mlp>,
    expert: Vec<Vec<f64>>,
    outer_x: Matrix,
    outer_l: Vec<usize>,
    outer: OuterLoss,
    rat_window: Option<usize>,
}

struct Runner<'a> {
    cfg: &'a MethodConfig,
    space: Space<'a>,
    classes: usize,
    t: Matrix,
    tl: Vec<usize>,
    t_classes: Vec<Matrix>,
    s_idx: Vec<Vec<usize>>,
    sl: Vec<usize>,
    v: Matrix,
    eta: f64,
    models: Vec<Mlp>,
    engine: Engine,
    proj_traj: Option<Trajectory>,
    privacy: Option<PrivacyLog>,
    s0: &'a SyntheticDataset,
}

fn resolve_kernel(cfg: &MethodConfig, t: &Matrix, classes: usize) -> Result<KernelSpec> {
    let k = cfg.kernel.as_ref().ok_or_else(|| Error::config("a kernel is required"))?;
    match *k {
        KernelConfig::Gaussian { c: Some(c) } => KernelSpec::gaussian(c),
        KernelConfig::Gaussian { c: None } => Ok(median_gaussian(t)?.0),
        KernelConfig::GammaExponential { gamma, c } => KernelSpec::gamma_exponential(gamma, c),
        KernelConfig::Linear => Ok(KernelSpec::Linear),
        KernelConfig::RandomFeature { features, sigma } => {
            let sigma = match sigma {
                Some(s) => s,
                None => median_gaussian(t)?.1,
            };
            KernelSpec::random_feature(features, t.cols(), sigma, seed::derive(cfg.seed, "kernel"))
        }
        KernelConfig::Ntk { models, bias } => {
            let widths = cfg.model.widths(t.cols(), classes);
            let ms = (0..models)
                .map(|k| Mlp::new(&widths, cfg.model.activation, seed::derive_indexed(cfg.seed, "ntk", k as u64)))
                .collect::<Result<Vec<_>>>()?;
            Ok(KernelSpec::EmpiricalNtk { models: ms, bias })
        }
        KernelConfig::Nfk => Ok(KernelSpec::Nfk {
            model: Mlp::new(
                &cfg.model.widths(t.cols(), classes),
                cfg.model.activation,
                seed::derive(cfg.seed, "nfk"),
            )?,
        }),
    }
}

/// Deterministic random subset of at most `k` row indices (all rows when
/// `k == 0` or `k >= n`), kept in increasing order.
fn subsample(n: usize, k: usize, seed: u64) -> Vec<usize> {
    if k == 0 || k >= n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut seed::rng(seed), n, k).into_vec();
    idx.sort_unstable();
    idx
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a MethodConfig, t: &LabeledDataset, s0: &'a SyntheticDataset, space: Space<'a>) -> Result<Self> {
        let classes = t.class_count();
        let tm = space.real(t.features())?;
        let tl = t.labels().to_vec();
        let t_idx = class_index(&tl, classes);
        if let Some(y) = t_idx.iter().position(|v| v.is_empty()) {
            return Err(Error::EmptyClass(y));
        }
        let t_classes: Vec<Matrix> = t_idx.iter().map(|i| tm.select_rows(i)).collect();
        let sl = s0.labels().to_vec();
        let s_idx = class_index(&sl, classes);
        let v = space.initial(s0.features())?;
        let method = cfg.method;
        let proxy = match cfg.variant("kmeans_proxy") {
            Some(Variant::KmeansProxy { k, period }) => Some((*k, *period)),
            _ => None,
        };

        let engine = match method {
            Method::Dm | Method::Mmd if cfg.has("dp_merf") || method == Method::Mmd => {
                let spec = resolve_kernel(cfg, &tm, classes)?;
                let merf_sigma = match cfg.variant("dp_merf") {
                    Some(Variant::DpMerf { sigma }) => Some(*sigma),
                    _ => None,
                };
                if merf_sigma.is_some() && !matches!(spec, KernelSpec::RandomFeature(_)) {
                    return Err(Error::config("dp_merf needs a random_feature kernel"));
                }
                Engine::Kernel(KernelState {
                    spec,
                    proxy,
                    sources: t_classes.clone(),
                    stats: Vec::new(),
                    merf_sigma,
                })
            }
            Method::Dm | Method::Gm | Method::Moment | Method::Sam => {
                let kind = match method {
                    Method::Dm => StatKind::Dm { layerwise: cfg.layerwise },
                    Method::Moment => StatKind::Moment,
                    Method::Sam => StatKind::Sam,
                    _ => StatKind::Gm {
                        contrastive: cfg.has("contrastive"),
                    },
                };
                let pipeline = match cfg.image_shape {
                    Some(shape) if cfg.augmentations().next().is_some() => {
                        let ops = cfg
                            .augmentations()
                            .map(|v| match *v {
                                Variant::Siamese { op } => AugOp::Siamese(op),
                                Variant::Multiform { r } => AugOp::Multiform(r),
                                _ => AugOp::Channel,
                            })
                            .collect();
                        if shape.iter().product::<usize>() != tm.cols() {
                            return Err(Error::config(format!(
                                "image_shape {shape:?} does not cover {} features",
                                tm.cols()
                            )));
                        }
                        Some(AugPipeline { ops, shape })
                    }
                    _ => None,
                };
                let dp = match cfg.variant("dp_grad") {
                    Some(Variant::DpGrad { sigma, clip }) => Some(DpGrad {
                        sigma: *sigma,
                        clip: *clip,
                    }),
                    _ => None,
                };
                Engine::Matching(MatchingState {
                    kind,
                    pipeline,
                    proxy,
                    sources: t_classes.clone(),
                    stats: Vec::new(),
                    dirty: true,
                    dp,
                    recomputes: 0,
                    curvature: curvature_rho(cfg).map(|r| (r, Vec::new())),
                })
            }
            Method::Krr => Engine::Krr(KrrState {
                spec: resolve_kernel(cfg, &tm, classes)?,
                robust: match cfg.variant("ridge_robust") {
                    Some(Variant::RidgeRobust { eps, steps }) => Some((*eps, *steps)),
                    _ => None,
                },
            }),
            _ => {
                let outer = match method {
                    Method::Robdc => match cfg.variant("robust_outer") {
                        Some(Variant::RobustOuter { eps, steps }) => OuterLoss::Adversarial(PgdConfig {
                            eps: *eps,
                            steps: *steps,
                            step_size: eps / 4.0,
                            loss: Loss::CrossEntropy,
                        }),
                        _ => return Err(Error::config("robdc needs robust_outer")),
                    },
                    _ => OuterLoss::Clean,
                };
                Engine::Bilevel(BilevelState {
                    method,
                    start: None,
                    expert: Vec::new(),
                    outer_x: tm.clone(),
                    outer_l: tl.clone(),
                    outer,
                    rat_window: match cfg.variant("rat_truncation") {
                        Some(Variant::RatTruncation { window }) => Some(*window),
                        _ => None,
                    },
                })
            }
        };

        let privacy = match (cfg.variant("dp_grad"), cfg.variant("dp_merf")) {
            (Some(Variant::DpGrad { sigma, clip }), _) => Some(PrivacyLog {
                mechanism: "dp_grad".into(),
                sigma: *sigma,
                clip_norm: Some(*clip),
                refreshes: 0,
                invocations: 0,
            }),
            (_, Some(Variant::DpMerf { sigma })) => Some(PrivacyLog {
                mechanism: "dp_merf".into(),
                sigma: *sigma,
                clip_norm: None,
                refreshes: 0,
                invocations: 0,
            }),
            _ => None,
        };

        let proj_traj = match cfg.regularizers.iter().find(|r| r.id == RegularizerId::Proj) {
            Some(term) => {
                let widths = cfg.model.widths(tm.cols(), classes);
                let start = Mlp::new(&widths, cfg.model.activation, seed::derive(cfg.seed, "proj-expert"))?;
                let tc = TrainConfig {
                    learning_rate: 0.1,
                    epochs: term.proj_epochs,
                    batch_size: 0,
                    loss: Loss::CrossEntropy,
                    seed: 0,
                };
                sgd_train(&start, &tm, &tl, &tc, true)?.1
            }
            None => None,
        };

        Ok(Runner {
            cfg,
            space,
            classes,
            t: tm,
            tl,
            t_classes,
            s_idx,
            sl,
            v,
            eta: cfg.bilevel.inner_lr,
            models: Vec::new(),
            engine,
            proj_traj,
            privacy,
            s0,
        })
    }

    fn penalty_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.engine {
            Engine::Matching(m) if m.curvature.is_some() => names.push("curvature".to_string()),
            Engine::Bilevel(b) if b.method == Method::Curvdc => names.push("curvature".to_string()),
            _ => {}
        }
        names
    }

    fn model_input_dim(&self) -> usize {
        match &self.engine {
            Engine::Matching(MatchingState {
                pipeline: Some(p), ..
            }) => p.out_dim(),
            _ => self.t.cols(),
        }
    }

    fn build_ensemble(&self, refresh: usize) -> Result<Vec<Mlp>> {
        let cfg = self.cfg;
        let widths = cfg.model.widths(self.model_input_dim(), self.classes);
        let e = cfg.ensemble;
        (0..e)
            .into_par_iter()
            .map(|k| {
                let idx = (refresh * e + k) as u64;
                let m = Mlp::new(&widths, cfg.model.activation, seed::derive_indexed(cfg.seed, "ensemble", idx))?;
                match cfg.model.source {
                    ModelSource::RandomInit => Ok(m),
                    ModelSource::Pretrained { epochs, learning_rate } => {
                        let tc = TrainConfig {
                            learning_rate,
                            epochs,
                            batch_size: 32,
                            loss: Loss::CrossEntropy,
                            seed: seed::derive_indexed(cfg.seed, "pretrain", idx),
                        };
                        Ok(sgd_train(&m, &self.t, &self.tl, &tc, false)?.0)
                    }
                }
            })
            .collect()
    }

    fn classes_of(&self, p: &Matrix) -> Vec<Matrix> {
        self.s_idx.iter().map(|i| p.select_rows(i)).collect()
    }


    fn refresh(&mut self, r: usize, p: &Matrix) -> Result<()> {
        let cfg = self.cfg;
        if cfg.needs_ensemble() {
            self.models = self.build_ensemble(r)?;
        }
        if let Some(pl) = self.privacy.as_mut() {
            if pl.mechanism == "dp_grad" {
                pl.refreshes += 1;
            }
        }
        let n = self.t.rows();
        match &mut self.engine {
            Engine::Matching(m) => {
                m.dirty = true;
                if let Some((_, caches)) = m.curvature.as_mut() {
                    let idx = subsample(n, CURV_SUBSAMPLE, seed::derive_indexed(cfg.seed, "curvature-subsample", r as u64));
                    let tx = self.t.select_rows(&idx);
                    let tl: Vec<usize> = idx.iter().map(|&i| self.tl[i]).collect();
                    *caches = self
                        .models
                        .par_iter()
                        .enumerate()
                        .map(|(k, model)| {
                            curvature_cache(
                                model,
                                &tx,
                                &tl,
                                p,
                                &self.sl,
                                cfg.bilevel.curvature_iters,
                                seed::derive_indexed(cfg.seed, "curvature-probe", (r * cfg.ensemble + k) as u64),
                            )
                        })
                        .collect::<Result<_>>()?;
                }
            }
            Engine::Bilevel(b) => {
                let widths = cfg.model.widths(self.t.cols(), self.classes);
                let start = Mlp::new(&widths, cfg.model.activation, seed::derive_indexed(cfg.seed, "inner-init", r as u64))?;
                if b.method != Method::CigRidge {
                    let idx = subsample(n, cfg.bilevel.outer_batch, seed::derive_indexed(cfg.seed, "outer-batch", r as u64));
                    b.outer_x = self.t.select_rows(&idx);
                    b.outer_l = idx.iter().map(|&i| self.tl[i]).collect();
                }
                if b.method == Method::Trajectory {
                    b.expert = gd_path(&start, &self.t, &self.tl, cfg.bilevel.inner_lr, cfg.bilevel.inner_steps)?;
                }
                if b.method == Method::Curvdc {
                    let idx = subsample(b.outer_x.rows(), CURV_SUBSAMPLE, seed::derive_indexed(cfg.seed, "curvature-subsample", r as u64));
                    b.outer = OuterLoss::Curvature {
                        weight: cfg.bilevel.curvature_weight,
                        x: b.outer_x.select_rows(&idx),
                        labels: idx.iter().map(|&i| b.outer_l[i]).collect(),
                        iters: cfg.bilevel.curvature_iters,
                        seed: seed::derive_indexed(cfg.seed, "curvature-probe", r as u64),
                    };
                }
                b.start = Some(start);
            }
            _ => {}
        }
        Ok(())
    }

    /// Updates the real-side sources of the k-means proxy.
    fn prepare(&mut self, step: usize) -> Result<()> {
        let cfg = self.cfg;
        let (proxy, sources) = match &mut self.engine {
            Engine::Matching(m) => (m.proxy, &mut m.sources),
            Engine::Kernel(k) => (k.proxy, &mut k.sources),
            _ => return Ok(()),
        };
        let changed = match proxy {
            Some((k, period)) if step % period == 0 => {
                let round = (step / period) as u64;
                *sources = self
                    .t_classes
                    .iter()
                    .enumerate()
                    .map(|(y, ty)| {
                        let s = seed::derive_indexed(cfg.seed, "kmeans-proxy", round * self.classes as u64 + y as u64);
                        Ok(kmeans_coreset(ty, k.min(ty.rows()), cfg.kmeans_iters, s)?.centers)
                    })
                    .collect::<Result<_>>()?;
                true
            }
            _ => false,
        };
        match &mut self.engine {
            Engine::Matching(m) => m.dirty |= changed,
            Engine::Kernel(k) if changed || k.stats.is_empty() => {
                k.stats = k.sources.iter().map(|s| kernel_stat(&k.spec, s)).collect::<Result<_>>()?;
                if let Some(sigma) = k.merf_sigma {
                    for (y, st) in k.stats.iter_mut().enumerate() {
                        if let KernelStat::Embedding(mu) = st {
                            privacy::add_gaussian_noise(mu, sigma, seed::derive_indexed(cfg.seed, "dp_merf", y as u64));
                        }
                    }
                    if let Some(pl) = self.privacy.as_mut() {
                        pl.invocations += self.classes;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn evaluate(&mut self, p: &Matrix, step: usize) -> Result<Eval> {
        let cfg = self.cfg;
        let s_classes = self.classes_of(p);
        match &mut self.engine {
            Engine::Matching(m) => {
                let draw = m.pipeline.as_ref().map(|pl| pl.draw(cfg.seed, step));
                let random = m.pipeline.as_ref().is_some_and(|pl| pl.is_random());
                if m.dirty || random {
                    let real: Vec<Matrix> = match (&m.pipeline, &draw) {
                        (Some(pl), Some(d)) => m
                            .sources
                            .iter()
                            .enumerate()
                            .map(|(y, x)| Ok(pl.apply(x, d, Side::Real, y)?.0))
                            .collect::<Result<_>>()?,
                        _ => m.sources.clone(),
                    };
                    let e = self.models.len();
                    let base = m.recomputes * e as u64;
                    let (kind, dp) = (m.kind, m.dp);
                    m.stats = self
                        .models
                        .par_iter()
                        .enumerate()
                        .map(|(k, model)| {
                            let noise = dp.map(|d| (d, seed::derive_indexed(cfg.seed, "dp_grad", base + k as u64)));
                            real_stats(kind, model, &real, noise)
                        })
                        .collect::<Result<_>>()?;
                    m.recomputes += 1;
                    m.dirty = false;
                    if let (Some(d), Some(pl)) = (dp, self.privacy.as_mut()) {
                        if d.sigma > 0.0 {
                            pl.invocations += e * self.classes;
                        }
                    }
                }
                let (aug_s, tapes): (Vec<Matrix>, Vec<Option<objectives::Tape>>) = match (&m.pipeline, &draw) {
                    (Some(pl), Some(d)) => {
                        let mut xs = Vec::new();
                        let mut ts = Vec::new();
                        for (y, sy) in s_classes.iter().enumerate() {
                            let (a, tape) = pl.apply(sy, d, Side::Synthetic, y)?;
                            xs.push(a);
                            ts.push(Some(tape));
                        }
                        (xs, ts)
                    }
                    _ => (s_classes.clone(), s_classes.iter().map(|_| None).collect()),
                };
                let per_model: Vec<(f64, Vec<Matrix>)> = self
                    .models
                    .par_iter()
                    .zip(&m.stats)
                    .map(|(model, st)| model_value_grad(m.kind, model, st, &aug_s))
                    .collect::<Result<_>>()?;
                let e = per_model.len() as f64;
                let value = crate::matrix::compensated_sum(per_model.iter().map(|(v, _)| *v)) / e;
                let mut grads: Vec<Matrix> = aug_s.iter().map(|a| Matrix::zeros(a.rows(), a.cols())).collect();
                for y in 0..grads.len() {
                    let len = grads[y].as_slice().len();
                    for i in 0..len {
                        let v = crate::matrix::compensated_sum(per_model.iter().map(|(_, g)| g[y].as_slice()[i])) / e;
                        grads[y].as_mut_slice()[i] = v;
                    }
                }
                let mut back = Vec::with_capacity(grads.len());
                for (y, g) in grads.into_iter().enumerate() {
                    back.push(match (&m.pipeline, &tapes[y]) {
                        (Some(pl), Some(tape)) => pl.vjp(tape, &g)?,
                        _ => g,
                    });
                }
                let mut grad = scatter(&self.s_idx, self.sl.len(), back, p.cols());
                let mut penalties = Vec::new();
                if let Some((rho, caches)) = &m.curvature {
                    let pens: Vec<(f64, Matrix)> = self
                        .models
                        .par_iter()
                        .zip(caches)
                        .map(|(model, c)| curvature_penalty(model, c, p, &self.sl, *rho))
                        .collect::<Result<_>>()?;
                    let pen = crate::matrix::compensated_sum(pens.iter().map(|(v, _)| *v)) / e;
                    for (_, g) in &pens {
                        crate::matrix::axpy(grad.as_mut_slice(), 1.0 / e, g.as_slice());
                    }
                    penalties.push(pen);
                }
                Ok(Eval {
                    method: value,
                    penalties,
                    grad,
                    eta_grad: None,
                })
            }
            Engine::Kernel(k) => {
                let mut value = KahanSum::default();
                let mut grads = Vec::with_capacity(self.classes);
                for (y, sy) in s_classes.iter().enumerate() {
                    let (v, g) = kernel_value_grad(&k.spec, &k.stats[y], sy)?;
                    value.add(v);
                    grads.push(g);
                }
                Ok(Eval {
                    method: value.total(),
                    penalties: Vec::new(),
                    grad: scatter(&self.s_idx, self.sl.len(), grads, p.cols()),
                    eta_grad: None,
                })
            }
            Engine::Krr(k) => {
                let yt = krr::one_hot(&self.tl, self.classes);
                let ys = krr::one_hot(&self.sl, self.classes);
                let mut t_eval = self.t.clone();
                if let Some((eps, steps)) = k.robust {
                    if eps > 0.0 {
                        let mut delta = Matrix::zeros(self.t.rows(), self.t.cols());
                        for _ in 0..steps {
                            let l = krr_loss_and_grad(&k.spec, &t_eval, &yt, p, &ys, cfg.ridge, true)?;
                            let gt = l.grad_t.expect("requested");
                            for (d, g) in delta.as_mut_slice().iter_mut().zip(gt.as_slice()) {
                                if *g != 0.0 {
                                    *d = (*d + eps / 4.0 * g.signum()).clamp(-eps, eps);
                                }
                            }
                            for ((o, b), d) in t_eval
                                .as_mut_slice()
                                .iter_mut()
                                .zip(self.t.as_slice())
                                .zip(delta.as_slice())
                            {
                                *o = b + d;
                            }
                        }
                    }
                }
                let l = krr_loss_and_grad(&k.spec, &t_eval, &yt, p, &ys, cfg.ridge, false)?;
                Ok(Eval {
                    method: l.value,
                    penalties: Vec::new(),
                    grad: l.grad_s,
                    eta_grad: None,
                })
            }
            Engine::Bilevel(b) => self::eval_bilevel(cfg, b, p, &self.sl, &self.t, &self.tl, self.eta, step),
        }
    }

    fn regularizer_terms(&self, p: &Matrix) -> Result<(Vec<f64>, Matrix)> {
        let cfg = self.cfg;
        let mut values = Vec::with_capacity(cfg.regularizers.len());
        let mut grad = Matrix::zeros(p.rows(), p.cols());
        if cfg.regularizers.is_empty() {
            return Ok((values, grad));
        }
        let centers: Option<Vec<Vec<f64>>> = if cfg.regularizers.iter().any(|r| r.id == RegularizerId::Intra) {
            let h = self.models.first().ok_or_else(|| Error::Context("intra needs a model".into()))?;
            Some(
                self.t_classes
                    .iter()
                    .map(|ty| {
                        let f: Vec<Vec<f64>> = ty.iter_rows().map(|r| h.penultimate(r)).collect::<Result<_>>()?;
                        let mut acc = vec![KahanSum::default(); f[0].len()];
                        for r in &f {
                            for (a, v) in acc.iter_mut().zip(r) {
                                a.add(*v);
                            }
                        }
                        Ok(acc.iter().map(|a| a.total() / f.len() as f64).collect())
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let base = RegularizerContext {
            models: &self.models,
            synthetic: None,
            real: Some((&self.t, &self.tl)),
            class_count: self.classes,
            class_centers: centers.as_deref(),
            trajectory: self.proj_traj.as_ref(),
            theta: None,
        };
        for term in &cfg.regularizers {
            values.push(regularizer_eval(term, &RegularizerContext { synthetic: Some((p, &self.sl)), ..base })?);
            if term.id.depends_on_synthetic() && term.weight != 0.0 {
                let g = central_difference(p.as_slice(), 1e-5, |x| {
                    let sp = Matrix::from_vec(p.rows(), p.cols(), x.to_vec())?;
                    regularizer_eval(term, &RegularizerContext { synthetic: Some((&sp, &self.sl)), ..base })
                })?;
                crate::matrix::axpy(grad.as_mut_slice(), term.weight, &g);
            }
        }
        Ok((values, grad))
    }

    fn run(mut self) -> Result<CondenseOutput> {
        let cfg = self.cfg;
        let mut terms: Vec<String> = cfg.regularizers.iter().map(|r| r.id.name().to_string()).collect();
        terms.extend(self.penalty_names());
        let learn_eta = matches!(self.engine, Engine::Bilevel(ref b) if matches!(b.method, Method::Bptt | Method::Robdc | Method::Curvdc))
            && cfg.bilevel.learn_inner_lr;
        let nvar = self.v.as_slice().len() + learn_eta as usize;
        let mut opt = Adam::new(cfg.optimizer, cfg.learning_rate, nvar);
        let mut log = StepLog {
            terms,
            records: Vec::with_capacity(cfg.steps),
        };
        let clip = !cfg.regime.optimizes_latent();
        for step in 0..cfg.steps {
            let p = self.space.to_matching(&self.v)?;
            if step % cfg.refresh == 0 {
                self.refresh(step / cfg.refresh, &p)?;
            }
            self.prepare(step)?;
            let ev = self.evaluate(&p, step)?;
            let (reg_values, reg_grad) = self.regularizer_terms(&p)?;
            let mut objective = KahanSum::default();
            objective.add(ev.method);
            for (term, v) in cfg.regularizers.iter().zip(&reg_values) {
                objective.add(term.weight * v);
            }
            for v in &ev.penalties {
                objective.add(*v);
            }
            let mut gp = ev.grad;
            crate::matrix::axpy(gp.as_mut_slice(), 1.0, reg_grad.as_slice());
            let gv = self.space.pullback(&gp)?;
            let mut g = gv.into_vec();
            if learn_eta {
                g.push(ev.eta_grad.unwrap_or(0.0));
            }
            let objective = objective.total();
            if !objective.is_finite() || g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { epoch: step });
            }
            let mut values = reg_values;
            values.extend(ev.penalties);
            log.records.push(StepRecord {
                step,
                objective,
                method: ev.method,
                terms: values,
                grad_norm: norm(&g),
            });
            let mut x = self.v.as_slice().to_vec();
            if learn_eta {
                x.push(self.eta);
            }
            opt.step(&mut x, &g);
            if learn_eta {
                self.eta = x.pop().unwrap().max(1e-6);
            }
            if clip {
                for v in &mut x {
                    *v = v.clamp(0.0, 1.0);
                }
            }
            self.v = Matrix::from_vec(self.v.rows(), self.v.cols(), x)?;
        }
        let features = self.space.to_input(&self.v)?;
        let mut synthetic = self.s0.with_features(features)?;
        synthetic.origin = format!("condense:{}", cfg.method.name());
        synthetic.seed = Some(cfg.seed);
        let inner_lr = matches!(self.engine, Engine::Bilevel(_)).then_some(self.eta);
        Ok(CondenseOutput {
            synthetic,
            log,
            privacy: self.privacy,
            latent: cfg.regime.optimizes_latent().then(|| self.v.clone()),
            inner_lr,
            coreset: None,
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_bilevel(
    cfg: &MethodConfig,
    b: &BilevelState,
    s: &Matrix,
    sl: &[usize],
    t: &Matrix,
    tl: &[usize],
    eta: f64,
    step: usize,
) -> Result<Eval> {
    let bc = &cfg.bilevel;
    let (rows, cols) = (s.rows(), s.cols());
    let h = bc.fd_step;
    match b.method {
        Method::CigRidge => {
            let classes = cfg_classes(tl, sl);
            let (v, g) = cig_ridge(t, &krr::one_hot(tl, classes), s, &krr::one_hot(sl, classes), cfg.ridge)?;
            Ok(Eval {
                method: v,
                penalties: Vec::new(),
                grad: g,
                eta_grad: None,
            })
        }
        Method::Trajectory => {
            let start = b.start.as_ref().expect("refreshed");
            let f = |x: &[f64]| -> Result<f64> {
                let sm = Matrix::from_vec(rows, cols, x.to_vec())?;
                let path = gd_path(start, &sm, sl, bc.inner_lr, bc.inner_steps)?;
                Ok(trajectory_mismatch(&path, &b.expert))
            };
            let value = f(s.as_slice())?;
            let g = central_difference(s.as_slice(), h, f)?;
            Ok(Eval {
                method: value,
                penalties: Vec::new(),
                grad: Matrix::from_vec(rows, cols, g)?,
                eta_grad: None,
            })
        }
        _ => {
            let start = b.start.as_ref().expect("refreshed");
            let k = bc.inner_steps;
            // randomized truncation: the first `end − window` steps see the
            // current synthetic set but are not differentiated
            let (from, steps) = match b.rat_window {
                Some(w) => {
                    let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "rat-truncation", step as u64));
                    let end = rand::Rng::random_range(&mut rng, w..=k);
                    (unroll(start, s, sl, eta, end - w)?, w)
                }
                None => (start.clone(), k),
            };
            let learn = bc.learn_inner_lr;
            let mut x = s.as_slice().to_vec();
            if learn {
                x.push(eta);
            }
            let f = |v: &[f64]| -> Result<(f64, f64)> {
                let sm = Matrix::from_vec(rows, cols, v[..rows * cols].to_vec())?;
                let e = if learn { v[rows * cols] } else { eta };
                unrolled_outer(&from, &sm, sl, &b.outer_x, &b.outer_l, e, steps, &b.outer)
            };
            let (total, pen) = f(&x)?;
            let mut g = central_difference(&x, h, |v| Ok(f(v)?.0))?;
            let eta_grad = if learn { g.pop() } else { None };
            Ok(Eval {
                method: total - pen,
                penalties: if b.method == Method::Curvdc { vec![pen] } else { Vec::new() },
                grad: Matrix::from_vec(rows, cols, g)?,
                eta_grad,
            })
        }
    }
}

fn scatter(s_idx: &[Vec<usize>], rows: usize, grads: Vec<Matrix>, cols: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, cols);
    for (y, g) in grads.into_iter().enumerate() {
        for (j, &row) in s_idx[y].iter().enumerate() {
            out.row_mut(row).copy_from_slice(g.row(j));
        }
    }
    out
}

fn cfg_classes(a: &[usize], b: &[usize]) -> usize {
    a.iter().chain(b).copied().max().map_or(0, |m| m + 1)
}
