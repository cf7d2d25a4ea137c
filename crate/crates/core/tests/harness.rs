use dcond::condense::{Method, MethodConfig};
use dcond::data::{save_dataset, two_gaussian_blobs};
use dcond::harness::plot::emit_plots;
use dcond::harness::{run_dataset, run_to_dir, RunConfig, RUN_ARTIFACTS};

fn quick(method: Method) -> RunConfig {
    let mut mc = MethodConfig::new(method);
    mc.steps = 10;
    let mut cfg = RunConfig::new(mc);
    cfg.evaluation.repeats = 2;
    cfg.evaluation.train.epochs = 20;
    cfg
}

#[test]
fn kcenter_keeping_every_point_matches_the_baseline() {
    let data = two_gaussian_blobs(40, 2, 6.0, 3).unwrap();
    let mut cfg = quick(Method::Kcenter);
    // 20 rows per class, 16 of them in the training split
    cfg.per_class = 16;
    let out = run_dataset(&cfg, &data, "blobs").unwrap();
    assert_eq!(out.report.synthetic_rows, 32);
    let a = &out.report.architectures[0];
    assert_eq!(a.synthetic.values, a.baseline.values);
}

#[test]
fn one_point_per_class_on_blobs() {
    let data = two_gaussian_blobs(2000, 2, 6.0, 17).unwrap();
    let mut cfg = RunConfig::new(MethodConfig::new(Method::Dm));
    cfg.evaluation.repeats = 1;
    cfg.discrepancy.metrics.clear();
    let out = run_dataset(&cfg, &data, "blobs").unwrap();
    let a = &out.report.architectures[0];
    assert!(a.synthetic.mean >= 0.95, "{}", a.synthetic.mean);
    assert!(a.synthetic.mean >= a.baseline.mean - 0.05);
}

#[test]
fn failed_run_leaves_no_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    save_dataset(&two_gaussian_blobs(20, 2, 6.0, 1).unwrap(), &data).unwrap();
    let mut cfg = quick(Method::Dm);
    cfg.dataset = Some(data);
    cfg.per_class = 50;
    let out = dir.path().join("out");
    let err = run_to_dir(&cfg, &out).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.exists());
}

#[test]
fn artifacts_are_written_and_plots_regenerate_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    save_dataset(&two_gaussian_blobs(60, 2, 6.0, 2).unwrap(), &data).unwrap();
    let mut cfg = quick(Method::Gm);
    cfg.dataset = Some(data);
    let out = dir.path().join("out");
    let res = run_to_dir(&cfg, &out).unwrap();
    for name in RUN_ARTIFACTS {
        assert!(out.join(name).exists(), "{name} missing");
    }
    assert!(!out.join(".staging").exists());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "gm");
    assert!(report["seeds"]["split"].is_u64());
    for (name, bytes) in emit_plots(Some(&res.report), &res.condensed.log) {
        assert_eq!(std::fs::read(out.join(&name)).unwrap(), bytes, "{name}");
    }
}
