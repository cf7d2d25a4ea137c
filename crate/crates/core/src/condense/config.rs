use serde::{Deserialize, Serialize};

use super::regularizers::{RegularizerId, RegularizerTerm};
use crate::augment::SiameseOp;
use crate::error::{Error, Result};
use crate::models::Activation;
use crate::spaces::Regime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dm,
    Gm,
    Mmd,
    Moment,
    Sam,
    Krr,
    Trajectory,
    Bptt,
    CigRidge,
    Robdc,
    Curvdc,
    Kcenter,
    Kmeans,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dm => "dm",
            Method::Gm => "gm",
            Method::Mmd => "mmd",
            Method::Moment => "moment",
            Method::Sam => "sam",
            Method::Krr => "krr",
            Method::Trajectory => "trajectory",
            Method::Bptt => "bptt",
            Method::CigRidge => "cig_ridge",
            Method::Robdc => "robdc",
            Method::Curvdc => "curvdc",
            Method::Kcenter => "kcenter",
            Method::Kmeans => "kmeans",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown method `{s}`")))
    }

    /// Statistic matching through a model ensemble.
    pub fn uses_ensemble(self) -> bool {
        matches!(self, Method::Dm | Method::Gm | Method::Moment | Method::Sam)
    }

    pub fn is_bilevel(self) -> bool {
        matches!(
            self,
            Method::Trajectory | Method::Bptt | Method::CigRidge | Method::Robdc | Method::Curvdc
        )
    }

    pub fn is_coreset(self) -> bool {
        matches!(self, Method::Kcenter | Method::Kmeans)
    }

    /// Methods whose outer gradient is available in the matching space, so
    /// that every regime can be expressed by a change of variable.
    pub fn supports_regimes(self) -> bool {
        matches!(
            self,
            Method::Dm | Method::Gm | Method::Mmd | Method::Moment | Method::Sam | Method::Krr
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    #[default]
    RandomInit,
    /// Each fresh model is trained on the real set for a few epochs.
    Pretrained { epochs: usize, learning_rate: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub source: ModelSource,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: default_hidden(),
            activation: default_activation(),
            source: ModelSource::default(),
        }
    }
}

impl ModelConfig {
    pub fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(output);
        w
    }
}

/// Kernel choice for `mmd` and `krr`. Bandwidths left out are set by the
/// median heuristic on the real set in the matching space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelConfig {
    Gaussian {
        #[serde(default)]
        c: Option<f64>,
    },
    GammaExponential { gamma: f64, c: f64 },
    Linear,
    RandomFeature {
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default)]
        sigma: Option<f64>,
    },
    /// Empirical NTK averaged over freshly initialized models of the
    /// configured architecture.
    Ntk {
        #[serde(default = "one")]
        models: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    Nfk,
}

fn default_features() -> usize {
    512
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_rho() -> f64 {
    0.01
}

fn default_clip() -> f64 {
    1.0
}

fn default_adv_steps() -> usize {
    10
}

fn default_ridge_steps() -> usize {
    5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    Siamese { op: SiameseOp },
    Multiform { r: usize },
    ChannelMultiform,
    Contrastive,
    Curvature {
        #[serde(default = "default_rho")]
        rho: f64,
    },
    /// Match against `k` k-means centers of each real class, recomputed every
    /// `period` steps.
    KmeansProxy { k: usize, period: usize },
    DpMerf { sigma: f64 },
    DpGrad {
        sigma: f64,
        #[serde(default = "default_clip")]
        clip: f64,
    },
    RobustOuter {
        eps: f64,
        #[serde(default = "default_adv_steps")]
        steps: usize,
    },
    RidgeRobust {
        eps: f64,
        #[serde(default = "default_ridge_steps")]
        steps: usize,
    },
    RatTruncation { window: usize },
}

impl Variant {
    pub fn kind(&self) -> &'static str {
        match self {
            Variant::Siamese { .. } => "siamese",
            Variant::Multiform { .. } => "multiform",
            Variant::ChannelMultiform => "channel_multiform",
            Variant::Contrastive => "contrastive",
            Variant::Curvature { .. } => "curvature",
            Variant::KmeansProxy { .. } => "kmeans_proxy",
            Variant::DpMerf { .. } => "dp_merf",
            Variant::DpGrad { .. } => "dp_grad",
            Variant::RobustOuter { .. } => "robust_outer",
            Variant::RidgeRobust { .. } => "ridge_robust",
            Variant::RatTruncation { .. } => "rat_truncation",
        }
    }

    fn is_augmentation(&self) -> bool {
        matches!(
            self,
            Variant::Siamese { .. } | Variant::Multiform { .. } | Variant::ChannelMultiform
        )
    }
}

/// Settings shared by the unrolled and implicit bilevel flavors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilevelConfig {
    /// Unrolled inner steps (bptt family) or expert epochs (trajectory).
    #[serde(default = "default_inner_steps")]
    pub inner_steps: usize,
    #[serde(default = "default_inner_lr")]
    pub inner_lr: f64,
    /// Treat the inner learning rate as a second outer variable.
    #[serde(default = "yes")]
    pub learn_inner_lr: bool,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    /// Real rows used by the outer loss, redrawn every refresh; 0 = all.
    #[serde(default)]
    pub outer_batch: usize,
    #[serde(default = "default_rho")]
    pub curvature_weight: f64,
    #[serde(default = "default_curv_iters")]
    pub curvature_iters: usize,
}

fn default_inner_steps() -> usize {
    5
}

fn default_inner_lr() -> f64 {
    0.1
}

fn default_fd_step() -> f64 {
    1e-4
}

fn default_curv_iters() -> usize {
    10
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            inner_steps: default_inner_steps(),
            inner_lr: default_inner_lr(),
            learn_inner_lr: true,
            fd_step: default_fd_step(),
            outer_batch: 0,
            curvature_weight: default_rho(),
            curvature_iters: default_curv_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: Method,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Outer steps between ensemble refreshes.
    #[serde(default = "default_refresh")]
    pub refresh: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    /// Ridge λ of `krr` and `cig_ridge`.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// `dm`: match every layer's feature mean instead of the logits only.
    #[serde(default)]
    pub layerwise: bool,
    #[serde(default)]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub regularizers: Vec<RegularizerTerm>,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub bilevel: BilevelConfig,
    /// `(c, h, w)` view of feature rows, needed by the image augmentations.
    #[serde(default)]
    pub image_shape: Option<[usize; 3]>,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    200
}

fn default_lr() -> f64 {
    0.01
}

fn default_refresh() -> usize {
    10
}

fn default_ensemble() -> usize {
    4
}

fn default_ridge() -> f64 {
    1e-3
}

fn default_kmeans_iters() -> usize {
    50
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        MethodConfig {
            method,
            steps: default_steps(),
            learning_rate: default_lr(),
            optimizer: Optimizer::default(),
            refresh: default_refresh(),
            ensemble: default_ensemble(),
            model: ModelConfig::default(),
            kernel: None,
            ridge: default_ridge(),
            layerwise: false,
            variants: Vec::new(),
            regularizers: Vec::new(),
            regime: Regime::default(),
            bilevel: BilevelConfig::default(),
            image_shape: None,
            kmeans_iters: default_kmeans_iters(),
            seed: 0,
        }
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variants.push(v);
        self
    }

    pub fn variant(&self, kind: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.kind() == kind)
    }

    pub fn has(&self, kind: &str) -> bool {
        self.variant(kind).is_some()
    }

    pub fn augmentations(&self) -> impl Iterator<Item = &Variant> {
        self.variants.iter().filter(|v| v.is_augmentation())
    }

    /// Whether the run builds a model ensemble.
    pub fn needs_ensemble(&self) -> bool {
        self.method.uses_ensemble() || self.regularizers.iter().any(|r| r.id.needs_models())
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let bad = |msg: String| Err(Error::config(msg));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.refresh == 0 || self.ensemble == 0 {
            return bad("refresh and ensemble must be >= 1".into());
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be >= 0, got {}", self.ridge));
        }
        if self.model.hidden.contains(&0) {
            return bad("hidden widths must be >= 1".into());
        }
        if let ModelSource::Pretrained { learning_rate, .. } = self.model.source {
            if !(learning_rate > 0.0 && learning_rate.is_finite()) {
                return bad("pretraining learning rate must be > 0".into());
            }
        }
        let b = &self.bilevel;
        if b.inner_steps == 0 || !(b.inner_lr > 0.0) || !(b.fd_step > 0.0) || b.curvature_iters == 0 {
            return bad("bilevel inner_steps, inner_lr, fd_step and curvature_iters must be positive".into());
        }
        if !(b.curvature_weight >= 0.0) {
            return bad("curvature_weight must be >= 0".into());
        }

        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].iter().any(|w| w.kind() == v.kind()) {
                return bad(format!("variant {} given twice", v.kind()));
            }
            let allowed: &[Method] = match v {
                Variant::Siamese { .. } | Variant::Multiform { .. } | Variant::ChannelMultiform => {
                    &[Method::Dm, Method::Gm, Method::Moment, Method::Sam]
                }
                Variant::Contrastive | Variant::Curvature { .. } | Variant::DpGrad { .. } => &[Method::Gm],
                Variant::KmeansProxy { .. } => &[Method::Dm, Method::Gm, Method::Mmd, Method::Moment, Method::Sam],
                Variant::DpMerf { .. } => &[Method::Mmd, Method::Dm],
                Variant::RidgeRobust { .. } => &[Method::Krr],
                Variant::RobustOuter { .. } => &[Method::Robdc],
                Variant::RatTruncation { .. } => &[Method::Bptt, Method::Robdc, Method::Curvdc],
            };
            if !allowed.contains(&m) {
                return bad(format!("variant {} cannot be combined with method {}", v.kind(), m.name()));
            }
            let nonneg = |x: f64, what: &str| -> Result<()> {
                if x >= 0.0 && x.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config(format!("{what} must be >= 0, got {x}")))
                }
            };
            match *v {
                Variant::Multiform { r } if r == 0 => return bad("multiform r must be >= 1".into()),
                Variant::Curvature { rho } => nonneg(rho, "rho")?,
                Variant::KmeansProxy { k, period } if k == 0 || period == 0 => {
                    return bad("kmeans_proxy needs k >= 1 and period >= 1".into())
                }
                Variant::DpMerf { sigma } => nonneg(sigma, "sigma")?,
                Variant::DpGrad { sigma, clip } => {
                    nonneg(sigma, "sigma")?;
                    if !(clip > 0.0) {
                        return bad("dp_grad clip norm must be > 0".into());
                    }
                }
                Variant::RobustOuter { eps, .. } | Variant::RidgeRobust { eps, .. } => nonneg(eps, "eps")?,
                Variant::RatTruncation { window } if window == 0 || window > b.inner_steps => {
                    return bad(format!("rat_truncation window must lie in 1..={}", b.inner_steps))
                }
                _ => {}
            }
        }
        if m == Method::Robdc && !self.has("robust_outer") {
            return bad("robdc needs a robust_outer variant giving eps".into());
        }
        if self.has("dp_merf") {
            if !matches!(self.kernel, Some(KernelConfig::RandomFeature { .. })) {
                return bad("dp_merf needs a random_feature kernel".into());
            }
            if self.has("kmeans_proxy") {
                return bad("dp_merf cannot be combined with kmeans_proxy".into());
            }
        }
        if self.augmentations().next().is_some() {
            if self.image_shape.is_none() {
                return bad("augmentation variants need image_shape".into());
            }
            if self.regime != Regime::InputInput {
                return bad("augmentation variants need the input_input regime".into());
            }
            if self.has("multiform") && self.regularizers.iter().any(|r| r.id.needs_models()) {
                return bad("model-based regularizers cannot see multiform inputs".into());
            }
            if self.has("multiform") && matches!(self.model.source, ModelSource::Pretrained { .. }) {
                return bad("pretrained ensembles cannot be combined with multiform".into());
            }
        }
        if let Some(shape) = self.image_shape {
            if shape.contains(&0) {
                return bad("image_shape entries must be >= 1".into());
            }
        }

        let kernel_methods = matches!(m, Method::Mmd | Method::Krr);
        if kernel_methods && self.kernel.is_none() {
            return bad(format!("method {} needs a kernel", m.name()));
        }
        if self.kernel.is_some() && !kernel_methods && !self.has("dp_merf") {
            return bad(format!("method {} does not use a kernel", m.name()));
        }
        if let Some(k) = &self.kernel {
            match *k {
                KernelConfig::Gaussian { c: Some(c) } if !(c > 0.0) => return bad("gaussian c must be > 0".into()),
                KernelConfig::GammaExponential { gamma, c } if !(gamma > 0.0 && gamma <= 2.0 && c > 0.0) => {
                    return bad("gamma_exponential needs 0 < gamma <= 2 and c > 0".into())
                }
                KernelConfig::RandomFeature { features, sigma } => {
                    if features == 0 || sigma.is_some_and(|s| !(s > 0.0)) {
                        return bad("random_feature needs features >= 1 and sigma > 0".into());
                    }
                }
                KernelConfig::Ntk { models, .. } if models == 0 => return bad("ntk needs models >= 1".into()),
                _ => {}
            }
        }
        if self.regime != Regime::InputInput && !m.supports_regimes() {
            return bad(format!("method {} only runs in the input_input regime", m.name()));
        }

        for r in &self.regularizers {
            r.validate()?;
            if m.is_coreset() {
                return bad("coreset methods take no regularizers".into());
            }
            if r.id == RegularizerId::Proj && !m.uses_ensemble() {
                return bad("proj only applies to ensemble-based methods".into());
            }
            if r.id.needs_two_models() && self.ensemble < 2 {
                return bad(format!("{} needs an ensemble of at least 2 models", r.id.name()));
            }
        }
        Ok(())
    }
}
