//! End-to-end runs: load, normalize, condense, train on the synthetic set,
//! test on held-out real data and write the reports.

pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condense::{condense_with_encoder, CondenseOutput, MethodConfig, PrivacyLog, StepLog};
use crate::data::{
    init_synthetic, load_dataset, load_synthetic, normalize_features, per_class_partition, save_synthetic, sidecar_path,
    stratified_split, InitMode, LabeledDataset, MinMaxScaling, SyntheticDataset,
};
use crate::discrepancy::{hierarchy_report, DiscrepancyReport, Metric, ModelBatch, Provenance, ReportOptions};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::models::{pgd_attack_batch, sgd_train, Activation, Loss, Mlp, PgdConfig, TrainConfig};
use crate::seed;
use crate::spaces::{fit_linear_autoencoder, LinearAutoencoder, Regime};

fn relu() -> Activation {
    Activation::Relu
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
}

impl Architecture {
    pub fn widths(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(&self.hidden);
        w.push(classes);
        w
    }
}

fn default_architectures() -> Vec<Architecture> {
    vec![Architecture {
        name: "mlp-64-64".into(),
        hidden: default_hidden(),
        activation: Activation::Relu,
    }]
}

fn default_repeats() -> usize {
    5
}

fn default_eval_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        epochs: 300,
        batch_size: 32,
        loss: Loss::CrossEntropy,
        seed: 0,
    }
}

/// How models trained on the synthetic set are judged. The `seed` of
/// `train` is ignored; every repeat derives its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_architectures")]
    pub architectures: Vec<Architecture>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_eval_train")]
    pub train: TrainConfig,
    /// Accuracy under this attack is reported when set.
    #[serde(default)]
    pub pgd: Option<PgdConfig>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            architectures: default_architectures(),
            repeats: default_repeats(),
            train: default_eval_train(),
            pgd: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::config("repeats must be at least 1"));
        }
        if self.architectures.is_empty() {
            return Err(Error::config("at least one architecture is required"));
        }
        if let Some(p) = &self.pgd {
            if !(p.eps >= 0.0 && p.eps.is_finite() && p.step_size >= 0.0) {
                return Err(Error::config("pgd eps and step_size must be finite and >= 0"));
            }
        }
        self.train.validate()
    }
}

fn default_metrics() -> Vec<Metric> {
    vec![Metric::Mmd, Metric::W1, Metric::Hausdorff, Metric::Cd, Metric::Gd]
}

fn default_cd_frequencies() -> usize {
    128
}

fn default_vd_uniform() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscrepancyConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_cd_frequencies")]
    pub cd_frequencies: usize,
    #[serde(default = "default_vd_uniform")]
    pub vd_uniform: usize,
}

impl Default for DiscrepancyConfig {
    fn default() -> Self {
        DiscrepancyConfig {
            metrics: default_metrics(),
            cd_frequencies: default_cd_frequencies(),
            vd_uniform: default_vd_uniform(),
        }
    }
}

impl DiscrepancyConfig {
    fn options(&self, global: u64) -> ReportOptions {
        ReportOptions {
            metrics: self.metrics.clone(),
            cd_frequencies: self.cd_frequencies,
            cd_seed: seed::derive(global, "cd"),
            vd_uniform: self.vd_uniform,
            vd_seed: seed::derive(global, "vd"),
            ..ReportOptions::default()
        }
    }
}

fn one() -> usize {
    1
}

fn subsample_init() -> InitMode {
    InitMode::Subsample
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Everything a run needs. `method.seed` and `method.regime` are overridden
/// by the derived condensation seed and by `regime`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub method: MethodConfig,
    #[serde(default = "one")]
    pub per_class: usize,
    #[serde(default = "subsample_init")]
    pub init: InitMode,
    #[serde(default)]
    pub evaluation: EvalConfig,
    #[serde(default)]
    pub discrepancy: DiscrepancyConfig,
    #[serde(default)]
    pub regime: Regime,
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(method: MethodConfig) -> Self {
        RunConfig {
            dataset: None,
            method,
            per_class: 1,
            init: InitMode::Subsample,
            evaluation: EvalConfig::default(),
            discrepancy: DiscrepancyConfig::default(),
            regime: Regime::InputInput,
            latent_dim: None,
            train_fraction: default_train_fraction(),
            out_dir: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid run config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::from_json(&text)?;
        // relative dataset paths are taken from the config file's directory
        if let (Some(d), Some(dir)) = (cfg.dataset.as_mut(), path.parent()) {
            if d.is_relative() && !dir.as_os_str().is_empty() {
                *d = dir.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::config("per_class must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.method.regime != Regime::InputInput && self.method.regime != self.regime {
            return Err(Error::config("method.regime disagrees with the run regime"));
        }
        match (self.regime, self.latent_dim) {
            (Regime::InputInput, _) => {}
            (_, None) | (_, Some(0)) => {
                return Err(Error::config("latent regimes need latent_dim >= 1"));
            }
            _ => {}
        }
        self.evaluation.validate()?;
        self.method_config().validate()
    }

    /// The method configuration actually passed to the condensation driver.
    pub fn method_config(&self) -> MethodConfig {
        let mut m = self.method.clone();
        m.regime = self.regime;
        m.seed = seed::derive(self.seed, "condense");
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyStats {
    pub mean: f64,
    /// Sample standard deviation (zero for a single repeat).
    pub std: f64,
    pub values: Vec<f64>,
}

impl AccuracyStats {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = crate::matrix::compensated_sum(values.iter().copied()) / n;
        let std = if values.len() > 1 {
            (crate::matrix::compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        AccuracyStats { mean, std, values }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureReport {
    pub name: String,
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Trained on the synthetic set.
    pub synthetic: AccuracyStats,
    /// Trained on the full training split with the same seeds.
    pub baseline: AccuracyStats,
    /// Synthetic-trained models under the configured attack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<AccuracyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: String,
    pub rows: usize,
    pub train_rows: usize,
    pub held_out_rows: usize,
    pub dim: usize,
    pub classes: usize,
    pub train_fraction: f64,
    pub normalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensationSummary {
    pub steps: usize,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
    pub nonincreasing_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub privacy: Option<PrivacyLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder_reconstruction_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub data: DataSummary,
    pub synthetic_rows: usize,
    pub per_class: usize,
    pub architectures: Vec<ArchitectureReport>,
    /// Baseline mean of the first architecture.
    pub baseline_accuracy: f64,
    /// Generalization discrepancy over the evaluation models of the first
    /// architecture.
    pub gd_estimate: Option<f64>,
    pub discrepancy: DiscrepancyReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robustness_attack: Option<PgdConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condensation: Option<CondensationSummary>,
    pub seeds: BTreeMap<String, u64>,
    pub evaluation: EvalConfig,
    /// Resolved run configuration, absent for standalone evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Wall-clock seconds per pipeline phase, kept apart from the report so the
/// report stays reproducible.
pub type Timings = BTreeMap<String, f64>;

fn timed<T>(timings: &mut Timings, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage));
    timings.insert(stage.to_string(), start.elapsed().as_secs_f64());
    out
}

/// Rows sorted by class, original order kept within a class.
pub fn class_sorted(d: &LabeledDataset) -> Result<LabeledDataset> {
    let part = per_class_partition(d)?;
    let idx: Vec<usize> = part.iter().flat_map(|(_, rows)| rows.iter().copied()).collect();
    Ok(d.subset(&idx))
}

/// Result of training fresh models on the synthetic set and on the full
/// training split.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub architectures: Vec<ArchitectureReport>,
    /// Synthetic-trained then baseline models of the first architecture.
    pub models: Vec<Mlp>,
}

/// Repeat `r` of architecture `a` uses the same initialization and shuffling
/// seeds for the synthetic and the baseline model.
pub fn evaluate_synthetic(
    s: &SyntheticDataset,
    train: &LabeledDataset,
    held: &LabeledDataset,
    cfg: &EvalConfig,
    global: u64,
) -> Result<Evaluation> {
    cfg.validate()?;
    if s.dim() != held.dim() || train.dim() != held.dim() {
        return Err(Error::Shape("synthetic, training and held-out dimensions differ".into()));
    }
    let classes = train.class_count().max(s.class_count());
    let sorted = class_sorted(train)?;
    let r = cfg.repeats;
    let jobs: Vec<(usize, usize)> = (0..cfg.architectures.len())
        .flat_map(|a| (0..r).map(move |k| (a, k)))
        .collect();
    type Job = (f64, f64, Option<f64>, Mlp, Mlp);
    let results: Vec<Job> = jobs
        .par_iter()
        .map(|&(a, k)| {
            let arch = &cfg.architectures[a];
            let idx = (a * r + k) as u64;
            // features are normalized to [0,1]; start the boundary at its center
            let init = Mlp::new(
                &arch.widths(s.dim(), classes),
                arch.activation,
                seed::derive_indexed(global, "eval-init", idx),
            )?
            .centered_at(&vec![0.5; s.dim()])?;
            let tc = TrainConfig {
                seed: seed::derive_indexed(global, "eval-train", idx),
                ..cfg.train
            };
            let (ms, _) = sgd_train(&init, s.features(), s.labels(), &tc, false)?;
            let (mt, _) = sgd_train(&init, sorted.features(), sorted.labels(), &tc, false)?;
            let acc_s = ms.accuracy(held.features(), held.labels())?;
            let acc_t = mt.accuracy(held.features(), held.labels())?;
            let robust = match &cfg.pgd {
                Some(p) => {
                    let adv = pgd_attack_batch(&ms, held.features(), held.labels(), p)?;
                    Some(ms.accuracy(&adv, held.labels())?)
                }
                None => None,
            };
            Ok((acc_s, acc_t, robust, ms, mt))
        })
        .collect::<Result<_>>()?;
    let mut architectures = Vec::with_capacity(cfg.architectures.len());
    for (a, arch) in cfg.architectures.iter().enumerate() {
        let chunk = &results[a * r..(a + 1) * r];
        architectures.push(ArchitectureReport {
            name: arch.name.clone(),
            widths: arch.widths(s.dim(), classes),
            activation: arch.activation,
            synthetic: AccuracyStats::from_values(chunk.iter().map(|j| j.0).collect()),
            baseline: AccuracyStats::from_values(chunk.iter().map(|j| j.1).collect()),
            robust: cfg
                .pgd
                .as_ref()
                .map(|_| AccuracyStats::from_values(chunk.iter().map(|j| j.2.unwrap_or(0.0)).collect())),
        });
    }
    let mut models: Vec<Mlp> = results[..r].iter().map(|j| j.3.clone()).collect();
    models.extend(results[..r].iter().map(|j| j.4.clone()));
    Ok(Evaluation { architectures, models })
}

/// In-memory outcome of [`run_dataset`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub timings: Timings,
    pub condensed: CondenseOutput,
    pub autoencoder: Option<LinearAutoencoder>,
}

/// Runs the whole pipeline on an already loaded dataset.
pub fn run_dataset(cfg: &RunConfig, data: &LabeledDataset, source: &str) -> Result<RunOutput> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let mut timings = Timings::new();
    let g = cfg.seed;
    let mut seeds = BTreeMap::new();
    let normalized = timed(&mut timings, "normalize", || normalize_features(data))?;
    seeds.insert("split".to_string(), seed::derive(g, "split"));
    let (train, held) = timed(&mut timings, "split", || {
        stratified_split(&normalized, cfg.train_fraction, seed::derive(g, "split"))
    })?;
    let ae = match cfg.regime {
        Regime::InputInput => None,
        _ => Some(timed(&mut timings, "autoencoder", || {
            fit_linear_autoencoder(&train, cfg.latent_dim.unwrap_or(0))
        })?),
    };
    seeds.insert("init".to_string(), seed::derive(g, "init"));
    let s0 = timed(&mut timings, "init", || {
        init_synthetic(&train, cfg.per_class, cfg.init, seed::derive(g, "init"))
    })?;
    let mcfg = cfg.method_config();
    seeds.insert("condense".to_string(), mcfg.seed);
    let condensed = timed(&mut timings, "condense", || condense_with_encoder(&mcfg, &train, &s0, ae.as_ref()))?;
    seeds.insert("evaluation".to_string(), g);
    let eval = timed(&mut timings, "evaluate", || {
        evaluate_synthetic(&condensed.synthetic, &train, &held, &cfg.evaluation, g)
    })?;
    let opts = cfg.discrepancy.options(g);
    seeds.insert("cd".to_string(), opts.cd_seed);
    seeds.insert("vd".to_string(), opts.vd_seed);
    let discrepancy = timed(&mut timings, "discrepancy", || {
        let batch = ModelBatch::new(eval.models.clone(), Provenance::Pretrained)?;
        hierarchy_report(&train, &condensed.synthetic.to_labeled(), Some(&batch), &opts)
    })?;
    let log = &condensed.log;
    let objectives = log.objectives();
    let condensation = CondensationSummary {
        steps: log.records.len(),
        initial_objective: objectives.first().copied(),
        final_objective: objectives.last().copied(),
        nonincreasing_fraction: log.nonincreasing_fraction(),
        inner_lr: condensed.inner_lr,
        privacy: condensed.privacy.clone(),
        autoencoder_reconstruction_error: match &ae {
            Some(a) => Some(a.reconstruction_error(train.features())?),
            None => None,
        },
    };
    let report = EvalReport {
        method: mcfg.method.name().to_string(),
        data: DataSummary {
            source: source.to_string(),
            rows: data.len(),
            train_rows: train.len(),
            held_out_rows: held.len(),
            dim: data.dim(),
            classes: data.class_count(),
            train_fraction: cfg.train_fraction,
            normalized: true,
        },
        synthetic_rows: condensed.synthetic.len(),
        per_class: cfg.per_class,
        baseline_accuracy: eval.architectures[0].baseline.mean,
        gd_estimate: discrepancy.gd,
        architectures: eval.architectures,
        discrepancy,
        robustness_attack: cfg.evaluation.pgd,
        condensation: Some(condensation),
        seeds,
        evaluation: cfg.evaluation.clone(),
        config: Some(RunConfig {
            method: mcfg,
            ..cfg.clone()
        }),
    };
    Ok(RunOutput {
        report,
        timings,
        condensed,
        autoencoder: ae,
    })
}

/// Loads `cfg.dataset` and runs the pipeline.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::config("run config has no dataset path"))?;
    let data = load_dataset(path).map_err(|e| e.in_stage("load"))?;
    run_dataset(cfg, &data, &path.display().to_string())
}

/// Runs and writes every artifact into `out`. Nothing is left behind in
/// `out` when a stage fails.
pub fn run_to_dir(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    let mut res = run(cfg)?;
    let start = Instant::now();
    write_run_artifacts(&res, out).map_err(|e| e.in_stage("write"))?;
    res.timings.insert("write".to_string(), start.elapsed().as_secs_f64());
    // the write phase is timed after the fact; rewrite just the timings file
    fs::write(out.join("timings.json"), serde_json::to_string_pretty(&res.timings)? + "\n")?;
    Ok(res)
}

/// Names of the files [`run_to_dir`] produces.
pub const RUN_ARTIFACTS: &[&str] = &[
    "synthetic.csv",
    "synthetic.meta.json",
    "report.json",
    "steps.csv",
    "timings.json",
    "objective.csv",
    "objective.svg",
    "accuracy.csv",
    "accuracy.svg",
];

fn write_run_artifacts(res: &RunOutput, out: &Path) -> Result<()> {
    stage_files(out, |dir| {
        save_synthetic(&res.condensed.synthetic, dir.join("synthetic.csv"))?;
        fs::write(dir.join("report.json"), res.report.to_json()?)?;
        res.condensed.log.write_csv(dir.join("steps.csv"))?;
        fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&res.timings)? + "\n")?;
        for (name, bytes) in plot::emit_plots(Some(&res.report), &res.condensed.log) {
            fs::write(dir.join(name), bytes)?;
        }
        if let Some(ae) = &res.autoencoder {
            ae.save(dir.join("autoencoder.json"))?;
        }
        Ok(())
    })
}

/// Writes into a staging directory under `out`, then moves the files into
/// place. On failure the staging directory (and `out`, if this call created
/// it and it is still empty) is removed.
pub fn stage_files(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let created = !out.exists();
    fs::create_dir_all(out)?;
    let staging = out.join(".staging");
    let cleanup = |staging: &Path| {
        let _ = fs::remove_dir_all(staging);
        if created && fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false) {
            let _ = fs::remove_dir(out);
        }
    };
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    let result = write(&staging).and_then(|_| {
        let mut names: Vec<PathBuf> = fs::read_dir(&staging)?
            .map(|e| e.map(|e| e.file_name().into()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for n in names {
            fs::rename(staging.join(&n), out.join(&n))?;
        }
        Ok(())
    });
    cleanup(&staging);
    result
}

fn rescale(d: &LabeledDataset, sc: &MinMaxScaling) -> Result<LabeledDataset> {
    let rows: Vec<Vec<f64>> = d.features().iter_rows().map(|r| sc.apply(r)).collect();
    d.with_features(Matrix::from_rows(&rows)?)
}

/// Discrepancies between two CSV datasets. When `path_s` has a metadata
/// sidecar recording a normalization, `path_t` is mapped through it first.
/// Model-based metrics use a batch of `models` random width-32 networks.
pub fn discrepancy_command(
    path_t: &Path,
    path_s: &Path,
    metrics: &[Metric],
    models: usize,
    global: u64,
) -> Result<DiscrepancyReport> {
    let t = load_dataset(path_t).map_err(|e| e.in_stage("load"))?;
    let s = load_dataset(path_s).map_err(|e| e.in_stage("load"))?;
    let scaling = if sidecar_path(path_s).exists() {
        load_synthetic(path_s).map_err(|e| e.in_stage("load"))?.scaling
    } else {
        None
    };
    let t = match &scaling {
        Some(sc) => rescale(&t, sc)?,
        None => t,
    };
    let opts = ReportOptions {
        metrics: metrics.to_vec(),
        cd_seed: seed::derive(global, "cd"),
        vd_seed: seed::derive(global, "vd"),
        ..ReportOptions::default()
    };
    let batch = if metrics.iter().any(|m| m.needs_models()) {
        let widths = [t.dim(), 64, 64, t.class_count().max(s.class_count())];
        Some(ModelBatch::random(&widths, Activation::Relu, models.max(1), seed::derive(global, "discrepancy-batch"))?)
    } else {
        None
    };
    let mut report = hierarchy_report(&t, &s, batch.as_ref(), &opts).map_err(|e| e.in_stage("discrepancy"))?;
    if let serde_json::Value::Object(hp) = &mut report.hyperparameters {
        hp.insert("metrics".into(), serde_json::to_value(metrics)?);
        hp.insert("seed".into(), global.into());
        hp.insert("a_rescaled_to_b_normalization".into(), scaling.is_some().into());
    }
    Ok(report)
}

/// Standalone evaluation of a saved synthetic set against a real CSV. The
/// real data is brought into the synthetic set's normalization when its
/// sidecar records one.
pub fn evaluate_command(
    synthetic: &Path,
    real: &Path,
    eval: &EvalConfig,
    disc: &DiscrepancyConfig,
    train_fraction: f64,
    global: u64,
) -> Result<EvalReport> {
    let s = load_synthetic(synthetic).map_err(|e| e.in_stage("load"))?;
    let raw = load_dataset(real).map_err(|e| e.in_stage("load"))?;
    let data = match &s.scaling {
        Some(sc) => rescale(&raw, sc)?,
        None => raw.clone(),
    };
    let (train, held) = stratified_split(&data, train_fraction, seed::derive(global, "split"))
        .map_err(|e| e.in_stage("split"))?;
    let ev = evaluate_synthetic(&s, &train, &held, eval, global).map_err(|e| e.in_stage("evaluate"))?;
    let opts = disc.options(global);
    let batch = ModelBatch::new(ev.models.clone(), Provenance::Pretrained)?;
    let discrepancy = hierarchy_report(&train, &s.to_labeled(), Some(&batch), &opts).map_err(|e| e.in_stage("discrepancy"))?;
    let mut seeds = BTreeMap::new();
    seeds.insert("split".to_string(), seed::derive(global, "split"));
    seeds.insert("evaluation".to_string(), global);
    seeds.insert("cd".to_string(), opts.cd_seed);
    seeds.insert("vd".to_string(), opts.vd_seed);
    Ok(EvalReport {
        method: s.origin.clone(),
        data: DataSummary {
            source: real.display().to_string(),
            rows: raw.len(),
            train_rows: train.len(),
            held_out_rows: held.len(),
            dim: raw.dim(),
            classes: raw.class_count(),
            train_fraction,
            normalized: s.scaling.is_some(),
        },
        synthetic_rows: s.len(),
        per_class: s.per_class(),
        baseline_accuracy: ev.architectures[0].baseline.mean,
        gd_estimate: discrepancy.gd,
        architectures: ev.architectures,
        discrepancy,
        robustness_attack: eval.pgd,
        condensation: None,
        seeds,
        evaluation: eval.clone(),
        config: None,
    })
}

/// Regenerates the plot files of a finished run directory.
pub fn plot_command(report: Option<&Path>, steps: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    let report: Option<EvalReport> = match report {
        Some(p) => Some(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => None,
    };
    let log = match steps {
        Some(p) => StepLog::from_csv(&fs::read_to_string(p)?)?,
        None => StepLog::default(),
    };
    let files = plot::emit_plots(report.as_ref(), &log);
    let names = files.iter().map(|(n, _)| n.clone()).collect();
    stage_files(out, |dir| {
        for (name, bytes) in &files {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    })?;
    Ok(names)
}
