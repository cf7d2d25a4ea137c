//! Acceptance suite. Every criterion prints one `[PASS]` or `[FAIL]` line;
//! the test fails if any criterion fails. Run with `--nocapture` to see the
//! summary.

use std::time::{Duration, Instant};

use dcond::augment::{apply_channel_mixers, channel_mixers, channel_multi_formation, multi_formation, ImageBatch};
use dcond::condense::{
    cig_ridge, condense, gm_objective, kcenter_covering, kcenter_exact, kcenter_greedy, krr_loss_and_grad,
    matching_objective, KernelConfig, Method, MethodConfig, Variant,
};
use dcond::data::{
    init_synthetic, normalize_features, save_dataset, two_gaussian_blobs, InitMode, LabeledDataset,
};
use dcond::discrepancy::{generalization_discrepancy_finite, hausdorff_distance, wasserstein1, GdOptions, ModelBatch};
use dcond::harness::{run_dataset, run_to_dir, RunConfig, RUN_ARTIFACTS};
use dcond::kernels::{kernel_eval, mmd_squared, mmd_squared_with_grad, random_feature_map, KernelSpec};
use dcond::matrix::{dist, Matrix};
use dcond::models::{Activation, Loss, Mlp};
use dcond::spaces::{regime_objective, LinearAutoencoder, Regime, RegimeDiscrepancy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-1, 1)` entries with a row count drawn from `rows`.
fn random_matrix(r: &mut ChaCha8Rng, rows: std::ops::RangeInclusive<usize>, cols: usize) -> Matrix {
    let rows = r.random_range(rows);
    let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Labels `0..c` cycled, so every class occurs once `rows >= c`.
fn cycled(rows: usize, c: usize) -> Vec<usize> {
    (0..rows).map(|i| i % c).collect()
}

fn labeled(x: Matrix, c: usize) -> LabeledDataset {
    let labels = cycled(x.rows(), c);
    LabeledDataset::new(x, labels, c).unwrap()
}

fn one_hot(labels: &[usize], c: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), c);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, 1.0);
    }
    m
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    l2(&diff) / l2(analytic).max(l2(numeric)).max(1e-12)
}

/// Central differences of `f` at `x` with step 1e-6.
fn central(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn with_data(m: &Matrix, data: &[f64]) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), data.to_vec()).unwrap()
}

fn random_kernel(r: &mut ChaCha8Rng, n: usize, seed: u64) -> KernelSpec {
    match r.random_range(0..4) {
        0 => KernelSpec::gaussian(r.random_range(0.2..3.0)).unwrap(),
        1 => KernelSpec::gamma_exponential(r.random_range(0.3..2.0), r.random_range(0.2..3.0)).unwrap(),
        2 => KernelSpec::Linear,
        _ => KernelSpec::random_feature(r.random_range(4..48), n, r.random_range(0.3..2.0), seed).unwrap(),
    }
}

fn mmd_oracle(r: &mut ChaCha8Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..200u64 {
        let n = r.random_range(1..=5);
        let t = random_matrix(r, 1..=10, n);
        let s = random_matrix(r, 1..=10, n);
        let spec = random_kernel(r, n, case);
        let got = mmd_squared(&spec, &t, &s).map_err(|e| e.to_string())?;
        let want = match spec {
            KernelSpec::RandomFeature(_) => {
                let mean_phi = |x: &Matrix| {
                    let mut acc: Vec<f64> = Vec::new();
                    for row in x.iter_rows() {
                        let phi = random_feature_map(&spec, row).unwrap();
                        if acc.is_empty() {
                            acc = vec![0.0; phi.len()];
                        }
                        for (a, p) in acc.iter_mut().zip(phi) {
                            *a += p / x.rows() as f64;
                        }
                    }
                    acc
                };
                let (a, b) = (mean_phi(&t), mean_phi(&s));
                a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
            }
            _ => {
                let avg = |a: &Matrix, b: &Matrix| {
                    let mut sum = 0.0;
                    for x in a.iter_rows() {
                        for y in b.iter_rows() {
                            sum += kernel_eval(&spec, x, y).unwrap();
                        }
                    }
                    sum / (a.rows() * b.rows()) as f64
                };
                avg(&t, &t) - 2.0 * avg(&t, &s) + avg(&s, &s)
            }
        };
        worst = worst.max((got - want).abs());
    }
    if worst <= 1e-10 {
        Ok(format!("200 pairs, max |diff| {worst:.2e}"))
    } else {
        Err(format!("max |diff| {worst:.2e} > 1e-10"))
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn w1_oracle(r: &mut ChaCha8Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = r.random_range(1..=6);
        let n = r.random_range(1..=4);
        let t = random_matrix(r, k..=k, n);
        let s = random_matrix(r, k..=k, n);
        let got = wasserstein1(&t, &s).map_err(|e| e.to_string())?;
        let want = permutations(k)
            .iter()
            .map(|p| (0..k).map(|i| dist(t.row(i), s.row(p[i]))).sum::<f64>() / k as f64)
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((got - want).abs());
    }
    if worst > 1e-9 {
        return Err(format!("brute force max |diff| {worst:.2e} > 1e-9"));
    }
    let mut violations = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=3);
        let sets: Vec<Matrix> = (0..3).map(|_| random_matrix(r, 1..=6, n)).collect();
        let w = |a: usize, b: usize| wasserstein1(&sets[a], &sets[b]).unwrap();
        if (w(0, 1) - w(1, 0)).abs() > 1e-9 || w(0, 2) > w(0, 1) + w(1, 2) + 1e-9 {
            violations += 1;
        }
    }
    if violations > 0 {
        return Err(format!("{violations} metric-axiom violations"));
    }
    Ok(format!("200 pairs max |diff| {worst:.2e}, 100 triples without violations"))
}

fn gradient_checks(r: &mut ChaCha8Rng) -> Outcome {
    let mut report = Vec::new();
    let mut fail = Vec::new();
    let mut record = |name: &str, errs: Vec<f64>| {
        let worst = errs.iter().copied().fold(0.0, f64::max);
        report.push(format!("{name} {worst:.1e}"));
        if errs.len() < 20 || worst > 1e-4 {
            fail.push(format!("{name} worst {worst:.2e} over {} configs", errs.len()));
        }
    };

    // MLP parameters and inputs
    let (mut pe, mut ie) = (Vec::new(), Vec::new());
    for case in 0..24u64 {
        let n = r.random_range(1..=4);
        let c = r.random_range(2..=3);
        let mut widths = vec![n];
        for _ in 0..r.random_range(1..=2) {
            widths.push(r.random_range(2..=5));
        }
        widths.push(c);
        let act = if case % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let loss = if case % 4 < 2 { Loss::CrossEntropy } else { Loss::Mse };
        // random biases keep ReLU pre-activations away from exact zeros
        let init = Mlp::new(&widths, act, 100 + case).unwrap();
        let p = (0..init.param_count()).map(|_| r.random_range(-1.0..1.0)).collect();
        let m = init.with_params(p).unwrap();
        let x = random_matrix(r, 1..=6, n);
        let labels: Vec<usize> = (0..x.rows()).map(|_| r.random_range(0..c)).collect();
        let g = m.backward(&x, &labels, loss).map_err(|e| e.to_string())?;
        let fd = central(m.params(), |p| m.with_params(p.to_vec()).unwrap().loss(&x, &labels, loss).unwrap());
        pe.push(rel_err(&g.param_grads, &fd));
        let fd = central(x.as_slice(), |v| m.loss(&with_data(&x, v), &labels, loss).unwrap());
        ie.push(rel_err(g.input_grads.as_slice(), &fd));
    }
    record("mlp-params", pe);
    record("mlp-inputs", ie);

    // statistic matching
    for method in [Method::Dm, Method::Gm, Method::Moment] {
        let mut errs = Vec::new();
        for case in 0..20u64 {
            let n = r.random_range(1..=3);
            let c = r.random_range(2..=3);
            let t = labeled(random_matrix(r, c..=8, n), c);
            let per = r.random_range(1..=2);
            let s = random_matrix(r, c * per..=c * per, n);
            let sl = cycled(s.rows(), c);
            let widths = [n, r.random_range(2..=4), c];
            let m = Mlp::new(&widths, Activation::Tanh, 200 + case).unwrap();
            let layerwise = case % 2 == 1;
            let (_, g) = matching_objective(method, layerwise, &m, &t, &s, &sl).map_err(|e| e.to_string())?;
            let fd = central(s.as_slice(), |v| {
                matching_objective(method, layerwise, &m, &t, &with_data(&s, v), &sl).unwrap().0
            });
            errs.push(rel_err(g.as_slice(), &fd));
        }
        record(method.name(), errs);
    }

    // mmd
    let mut errs = Vec::new();
    for case in 0..24u64 {
        let n = r.random_range(1..=4);
        let t = random_matrix(r, 1..=8, n);
        let s = random_matrix(r, 1..=5, n);
        let spec = match case % 3 {
            0 => KernelSpec::gaussian(r.random_range(0.3..2.0)).unwrap(),
            1 => KernelSpec::gamma_exponential(r.random_range(1.0..1.9), r.random_range(0.3..2.0)).unwrap(),
            _ => KernelSpec::random_feature(32, n, 1.0, case).unwrap(),
        };
        let (_, g) = mmd_squared_with_grad(&spec, &t, &s).map_err(|e| e.to_string())?;
        let fd = central(s.as_slice(), |v| mmd_squared(&spec, &t, &with_data(&s, v)).unwrap());
        errs.push(rel_err(g.as_slice(), &fd));
    }
    record("mmd", errs);

    // krr with a gamma-exponential kernel
    let mut errs = Vec::new();
    for _ in 0..20 {
        let n = r.random_range(1..=4);
        let c = r.random_range(2..=3);
        let t = random_matrix(r, 2..=8, n);
        let s = random_matrix(r, 1..=4, n);
        let yt = one_hot(&cycled(t.rows(), c), c);
        let ys = one_hot(&cycled(s.rows(), c), c);
        let spec = KernelSpec::gamma_exponential(r.random_range(1.0..1.9), r.random_range(0.3..2.0)).unwrap();
        let lambda = r.random_range(1e-2..1.0);
        let g = krr_loss_and_grad(&spec, &t, &yt, &s, &ys, lambda, false).map_err(|e| e.to_string())?;
        let fd = central(s.as_slice(), |v| {
            krr_loss_and_grad(&spec, &t, &yt, &with_data(&s, v), &ys, lambda, false).unwrap().value
        });
        errs.push(rel_err(g.grad_s.as_slice(), &fd));
    }
    record("krr", errs);

    if fail.is_empty() {
        Ok(report.join(", "))
    } else {
        Err(fail.join("; "))
    }
}

fn hierarchy(r: &mut ChaCha8Rng) -> Outcome {
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for case in 0..100u64 {
        let n = r.random_range(1..=4);
        let c = r.random_range(2..=3);
        let t = labeled(random_matrix(r, c..=20, n), c);
        let s = labeled(random_matrix(r, c..=6, n), c);
        let widths = [n, r.random_range(2..=6), c];
        let act = if case % 2 == 0 { Activation::Relu } else { Activation::Tanh };
        let h = ModelBatch::random(&widths, act, r.random_range(1..=16), 300 + case).unwrap();
        let res = generalization_discrepancy_finite(&h, &t, &s, &GdOptions::default()).map_err(|e| e.to_string())?;
        let slack = 2.0 * res.dd_loss + 1e-9 - res.gd;
        tightest = tightest.min(slack);
        if slack < 0.0 {
            violations += 1;
        }
    }
    if violations == 0 {
        Ok(format!("100 triples, smallest slack {tightest:.3e}"))
    } else {
        Err(format!("{violations} violations"))
    }
}

fn cig(r: &mut ChaCha8Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = r.random_range(1..=4);
        let c = r.random_range(1..=3);
        let t = random_matrix(r, 3..=12, n);
        let s = random_matrix(r, 2..=6, n);
        let yt = random_matrix(r, t.rows()..=t.rows(), c);
        let ys = random_matrix(r, s.rows()..=s.rows(), c);
        let lambda = r.random_range(0.05..1.0);
        let (_, g) = cig_ridge(&t, &yt, &s, &ys, lambda).map_err(|e| e.to_string())?;
        let fd = central(s.as_slice(), |v| cig_ridge(&t, &yt, &with_data(&s, v), &ys, lambda).unwrap().0);
        worst = worst.max(rel_err(g.as_slice(), &fd));
    }
    if worst <= 1e-4 {
        Ok(format!("20 instances, worst relative error {worst:.2e}"))
    } else {
        Err(format!("worst relative error {worst:.2e} > 1e-4"))
    }
}

fn kcenter(r: &mut ChaCha8Rng) -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..50 {
        let size = r.random_range(3..=12);
        let m = r.random_range(1..=3.min(size));
        let x = random_matrix(r, size..=size, 2);
        let g = kcenter_greedy(&x, m).map_err(|e| e.to_string())?;
        let e = kcenter_exact(&x, m).map_err(|e| e.to_string())?;
        if g.radius > 2.0 * e.radius + 1e-12 {
            return Err(format!("greedy {} > 2 x exact {}", g.radius, e.radius));
        }
        if e.radius > 0.0 {
            worst_ratio = worst_ratio.max(g.radius / e.radius);
        }
    }
    let fixture = Matrix::from_rows(&[[0.0], [4.0], [10.0]]).unwrap();
    for cover in [kcenter_exact(&fixture, 1), kcenter_covering(&fixture, 1)] {
        let cover = cover.map_err(|e| e.to_string())?;
        let dh = hausdorff_distance(&fixture, &fixture.select_rows(&cover.indices)).map_err(|e| e.to_string())?;
        if cover.radius != 6.0 || dh != 6.0 {
            return Err(format!("fixture radius {} / d_H {dh}, expected 6", cover.radius));
        }
    }
    Ok(format!("50 instances, worst greedy/exact {worst_ratio:.3}; fixture d_H = 6"))
}

fn efficacy() -> Outcome {
    let methods = [Method::Dm, Method::Gm, Method::Mmd, Method::Krr, Method::Kcenter, Method::Kmeans];
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_base = f64::INFINITY;
    let mut fails = Vec::new();
    for seed in 0..5u64 {
        let data = two_gaussian_blobs(2000, 2, 6.0, 1000 + seed).map_err(|e| e.to_string())?;
        for method in methods {
            let mut mc = MethodConfig::new(method);
            if matches!(method, Method::Mmd | Method::Krr) {
                mc.kernel = Some(KernelConfig::Gaussian { c: None });
            }
            let mut cfg = RunConfig::new(mc);
            cfg.per_class = 1;
            cfg.seed = seed;
            cfg.evaluation.repeats = 1;
            cfg.discrepancy.metrics.clear();
            let out = run_dataset(&cfg, &data, "blobs").map_err(|e| format!("{} seed {seed}: {e}", method.name()))?;
            let a = &out.report.architectures[0];
            let gap = a.baseline.mean - a.synthetic.mean;
            worst_gap = worst_gap.max(gap);
            worst_base = worst_base.min(a.baseline.mean);
            if gap > 0.05 || a.baseline.mean < 0.99 {
                fails.push(format!(
                    "{} seed {seed}: synthetic {:.4}, baseline {:.4}",
                    method.name(),
                    a.synthetic.mean,
                    a.baseline.mean
                ));
            }
        }
    }
    if fails.is_empty() {
        Ok(format!("6 methods x 5 seeds, worst gap {worst_gap:.4}, lowest baseline {worst_base:.4}"))
    } else {
        Err(fails.join("; "))
    }
}

fn regimes(r: &mut ChaCha8Rng) -> Outcome {
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let n = r.random_range(1..=4);
        let c = r.random_range(1..=3);
        let t = labeled(random_matrix(r, c..=10, n), c);
        let s = labeled(random_matrix(r, c..=5, n), c);
        let ae = LinearAutoencoder::identity(n);
        let discs = [
            RegimeDiscrepancy::Mmd(KernelSpec::gaussian(r.random_range(0.3..2.0)).unwrap()),
            RegimeDiscrepancy::W1,
            RegimeDiscrepancy::IpmFeature(ModelBatch::random(&[n, 4, c], Activation::Tanh, 3, 400 + case).unwrap()),
        ];
        for d in &discs {
            let vals: Vec<f64> = Regime::all()
                .iter()
                .map(|&g| regime_objective(g, &ae, &t, &s, d))
                .collect::<dcond::Result<_>>()
                .map_err(|e| e.to_string())?;
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(hi - lo);
        }
    }
    if worst > 1e-10 {
        return Err(format!("identity encoder spread {worst:.2e} > 1e-10"));
    }
    // the encoder keeps the first coordinate only; S differs from T along the
    // discarded direction
    let ae = LinearAutoencoder::from_parts(vec![0.0, 0.0], vec![vec![1.0, 0.0]]).map_err(|e| e.to_string())?;
    let t = LabeledDataset::new(
        Matrix::from_rows(&[[0.2, 0.1], [0.7, 0.3], [0.5, 0.5]]).unwrap(),
        vec![0, 0, 1],
        2,
    )
    .unwrap();
    let s = t
        .with_features(Matrix::from_rows(&[[0.2, 0.9], [0.7, 0.6], [0.5, 0.0]]).unwrap())
        .unwrap();
    let k = RegimeDiscrepancy::Mmd(KernelSpec::gaussian(1.0).unwrap());
    let latent = regime_objective(Regime::LatentInput, &ae, &t, &s, &k).map_err(|e| e.to_string())?;
    let input = regime_objective(Regime::InputInput, &ae, &t, &s, &k).map_err(|e| e.to_string())?;
    if latent != 0.0 || input <= 1e-3 {
        return Err(format!("counterexample latent {latent:.3e}, input {input:.3e}"));
    }
    Ok(format!("identity spread {worst:.1e}; null-space latent 0, input MMD {input:.4}"))
}

fn objectives_bits(cfg: &MethodConfig, t: &LabeledDataset, per_class: usize) -> dcond::Result<(Vec<u64>, Vec<u64>)> {
    let s0 = init_synthetic(t, per_class, InitMode::Subsample, 11)?;
    let out = condense(cfg, t, &s0)?;
    let obj = out.log.objectives().iter().map(|v| v.to_bits()).collect();
    let feats = out.synthetic.features().as_slice().iter().map(|v| v.to_bits()).collect();
    Ok((obj, feats))
}

fn ladders() -> Outcome {
    let blobs = two_gaussian_blobs(200, 2, 6.0, 7).map_err(|e| e.to_string())?;
    let t = normalize_features(&blobs).map_err(|e| e.to_string())?;
    let zero = t.labels().iter().enumerate().filter(|(_, &y)| y == 0).map(|(i, _)| i);
    let rows: Vec<usize> = zero.collect();
    let one_class = LabeledDataset::new(t.features().select_rows(&rows), vec![0; rows.len()], 1).unwrap();

    let base = |m: Method, steps: usize| {
        let mut c = MethodConfig::new(m);
        c.steps = steps;
        c.seed = 3;
        c
    };
    let rbf = Some(KernelConfig::Gaussian { c: Some(1.0) });
    let rf = Some(KernelConfig::RandomFeature {
        features: 64,
        sigma: Some(1.0),
    });

    let mut krr = base(Method::Krr, 20);
    krr.kernel = rbf;
    let mut mmd = base(Method::Mmd, 20);
    mmd.kernel = rf.clone();
    let mut merf = base(Method::Dm, 20).with_variant(Variant::DpMerf { sigma: 0.0 });
    merf.kernel = rf;

    let cases: Vec<(&str, MethodConfig, MethodConfig, &LabeledDataset)> = vec![
        (
            "robdc eps=0 / bptt",
            base(Method::Robdc, 8).with_variant(Variant::RobustOuter { eps: 0.0, steps: 5 }),
            base(Method::Bptt, 8),
            &t,
        ),
        (
            "krr ridge_robust eps=0 / krr",
            krr.clone().with_variant(Variant::RidgeRobust { eps: 0.0, steps: 5 }),
            krr,
            &t,
        ),
        (
            "gm dp_grad sigma=0 / gm",
            base(Method::Gm, 20).with_variant(Variant::DpGrad { sigma: 0.0, clip: 1.0 }),
            base(Method::Gm, 20),
            &t,
        ),
        ("dm dp_merf sigma=0 / mmd", merf, mmd, &t),
        (
            "contrastive gm C=1 / gm",
            base(Method::Gm, 20).with_variant(Variant::Contrastive),
            base(Method::Gm, 20),
            &one_class,
        ),
    ];
    let mut names = Vec::new();
    for (name, a, b, data) in cases {
        let ra = objectives_bits(&a, data, 2).map_err(|e| format!("{name}: {e}"))?;
        let rb = objectives_bits(&b, data, 2).map_err(|e| format!("{name}: {e}"))?;
        if ra.0.is_empty() || ra != rb {
            return Err(format!("{name}: sequences differ"));
        }
        names.push(name);
    }

    // with a single synthetic class the contrastive sum reduces to that class
    let mut r = rng(9);
    for case in 0..10u64 {
        let c = 3;
        let td = labeled(random_matrix(&mut r, 9..=9, 2), c);
        let s = random_matrix(&mut r, 2..=2, 2);
        let y = (case % 3) as usize;
        let sl = vec![y; 2];
        let m = Mlp::new(&[2, 4, c], Activation::Tanh, 500 + case).unwrap();
        let a = gm_objective(true, &m, &td, &s, &sl).map_err(|e| e.to_string())?;
        let b = gm_objective(false, &m, &td, &s, &sl).map_err(|e| e.to_string())?;
        if a.0.to_bits() != b.0.to_bits() || a.1 != b.1 {
            return Err("single-class contrastive objective differs from per-class".into());
        }
    }
    Ok(format!("bitwise equal: {}", names.join(", ")))
}

fn formation(r: &mut ChaCha8Rng) -> Outcome {
    let mut shapes = 0;
    let mut worst: f64 = 0.0;
    let random_batch = |r: &mut ChaCha8Rng, shape: [usize; 4]| {
        let len = shape.iter().product();
        ImageBatch::new(shape, (0..len).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    };
    for b in 1..=3 {
        for c in 1..=3 {
            for h in [2, 3, 4, 6] {
                for w in [2, 3, 4, 6] {
                    let x = random_batch(r, [b, c, h, w]);
                    for rr in (1..=h.min(w)).filter(|k| h % k == 0 && w % k == 0) {
                        let out = multi_formation(&x, rr).map_err(|e| e.to_string())?;
                        if out.shape() != [b, c * (rr * rr + 1), h, w] {
                            return Err(format!("multi_formation {:?} r={rr} gave {:?}", x.shape(), out.shape()));
                        }
                        let y = random_batch(r, [b, c, h, w]);
                        let (al, be) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
                        let lhs = multi_formation(&x.scale_add(al, &y, be).unwrap(), rr).unwrap();
                        let rhs = out.scale_add(al, &multi_formation(&y, rr).unwrap(), be).unwrap();
                        worst = worst.max(lhs.max_abs_diff(&rhs));
                        shapes += 1;
                    }
                    let cm = channel_multi_formation(&x, (b * 100 + c * 10 + h + w) as u64).map_err(|e| e.to_string())?;
                    let mixed = apply_channel_mixers(&x, &channel_mixers(b, c, 1)).map_err(|e| e.to_string())?;
                    if cm.shape() != [4 * b, c, h, w] || mixed.shape() != [4 * b, c, h, w] {
                        return Err(format!("channel formation of {:?} gave {:?}", x.shape(), cm.shape()));
                    }
                }
            }
        }
    }
    if worst > 1e-12 {
        return Err(format!("linearity defect {worst:.2e} > 1e-12"));
    }
    Ok(format!("{shapes} (shape, r) pairs, linearity defect {worst:.1e}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("blobs.csv");
    save_dataset(&two_gaussian_blobs(400, 2, 6.0, 21).unwrap(), &data).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for method in [Method::Gm, Method::Mmd] {
        let mut mc = MethodConfig::new(method);
        mc.steps = 30;
        if method == Method::Mmd {
            mc.kernel = Some(KernelConfig::Gaussian { c: None });
        }
        let mut cfg = RunConfig::new(mc);
        cfg.dataset = Some(data.clone());
        cfg.per_class = 2;
        cfg.seed = 5;
        cfg.evaluation.repeats = 2;
        cfg.evaluation.train.epochs = 50;
        let outs: Vec<_> = (0..2).map(|k| dir.path().join(format!("{}-{k}", method.name()))).collect();
        for o in &outs {
            run_to_dir(&cfg, o).map_err(|e| e.to_string())?;
        }
        for name in RUN_ARTIFACTS.iter().filter(|n| **n != "timings.json") {
            let a = std::fs::read(outs[0].join(name));
            let b = std::fs::read(outs[1].join(name));
            match (a, b) {
                (Ok(a), Ok(b)) if a == b => compared += 1,
                (Err(_), Err(_)) => {}
                _ => return Err(format!("{} {name} differs between runs", method.name())),
            }
        }
    }
    Ok(format!("{compared} artifacts byte-identical across repeated runs"))
}

#[test]
fn acceptance() {
    let mut r = rng(20240601);
    type Criterion<'a> = (&'a str, Duration, Box<dyn FnOnce(&mut ChaCha8Rng) -> Outcome>);
    let criteria: Vec<Criterion> = vec![
        ("1 mmd oracle", Duration::from_secs(10), Box::new(mmd_oracle)),
        ("2 w1 oracle and metric axioms", Duration::from_secs(30), Box::new(w1_oracle)),
        ("3 gradients vs finite differences", Duration::from_secs(120), Box::new(gradient_checks)),
        ("4 gd hierarchy bound", Duration::MAX, Box::new(hierarchy)),
        ("5 implicit ridge gradient", Duration::MAX, Box::new(cig)),
        ("6 k-center quality", Duration::MAX, Box::new(kcenter)),
        ("7 blob condensation efficacy", Duration::from_secs(300), Box::new(|_| efficacy())),
        ("8 regime consistency", Duration::MAX, Box::new(regimes)),
        ("9 degeneracy ladders", Duration::MAX, Box::new(|_| ladders())),
        ("10 formation operators", Duration::MAX, Box::new(formation)),
        ("11 end-to-end determinism", Duration::MAX, Box::new(|_| determinism())),
    ];
    let mut failed = Vec::new();
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check(&mut r);
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if took > limit => Err(format!("{msg}; took {took:.1?}, limit {limit:.0?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("[PASS] {name}: {msg} ({took:.2?})"),
            Err(msg) => {
                println!("[FAIL] {name}: {msg} ({took:.2?})");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
