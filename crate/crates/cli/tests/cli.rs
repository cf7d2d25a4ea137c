use std::path::Path;
use std::process::{Command, Output};

fn dcond(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcond"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn values(o: &Output) -> Vec<(String, f64)> {
    stdout(o)
        .lines()
        .map(|l| {
            let (k, v) = l.split_once(' ').unwrap();
            (k.to_string(), v.parse().unwrap())
        })
        .collect()
}

#[test]
fn same_file_twice_gives_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(dcond(&["blobs", "--n", "30", "--out", "t.csv"], p).status.success());
    let o = dcond(&["discrepancy", "--a", "t.csv", "--b", "t.csv", "--out", "r.json"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let vals = values(&o);
    assert_eq!(vals.len(), 3);
    for (name, v) in vals {
        assert!(v.abs() <= 1e-12, "{name} = {v}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert!(report["hyperparameters"]["metrics"].is_array());
}

#[test]
fn dirac_pair_at_distance_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("a.csv"), "f0,label\n0,0\n").unwrap();
    std::fs::write(p.join("b.csv"), "f0,label\n3,0\n").unwrap();
    let o = dcond(&["discrepancy", "--a", "a.csv", "--b", "b.csv", "--metrics", "w1"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(values(&o), vec![("w1".to_string(), 3.0)]);
}

#[test]
fn condense_then_evaluate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(dcond(&["blobs", "--n", "80", "--seed", "4", "--out", "t.csv"], p).status.success());
    let o = dcond(
        &["condense", "--dataset", "t.csv", "--method", "dm", "--steps", "5", "--repeats", "1", "--out", "run"],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["synthetic.csv", "report.json", "steps.csv", "objective.svg", "accuracy.svg"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    let o = dcond(
        &["evaluate", "--synthetic", "run/synthetic.csv", "--real", "t.csv", "--repeats", "1", "--epochs", "20"],
        p,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("synthetic"));
    let o = dcond(&["plot", "--report", "run/report.json", "--steps", "run/steps.csv", "--out", "plots"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["objective.svg", "objective.csv", "accuracy.svg", "accuracy.csv"] {
        assert_eq!(
            std::fs::read(p.join("plots").join(f)).unwrap(),
            std::fs::read(p.join("run").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(dcond(&["condense", "--method", "nope", "--out", "x"], p).status.code(), Some(2));
    assert_eq!(
        dcond(&["discrepancy", "--a", "missing.csv", "--b", "missing.csv"], p).status.code(),
        Some(2)
    );
    std::fs::write(p.join("run.json"), r#"{"method": {"method": "dm"}, "unknown": 1}"#).unwrap();
    assert_eq!(dcond(&["condense", "--config", "run.json", "--out", "x"], p).status.code(), Some(2));
    assert!(!p.join("x").exists());
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(dcond(&["blobs", "--n", "60", "--out", "t.csv"], p).status.success());
    std::fs::write(
        p.join("run.json"),
        r#"{"dataset": "t.csv", "method": {"method": "dm", "steps": 2},
            "evaluation": {"repeats": 1, "train": {"learning_rate": 1e300, "epochs": 5,
            "batch_size": 32, "loss": "cross_entropy", "seed": 0}}}"#,
    )
    .unwrap();
    let o = dcond(&["condense", "--config", "run.json", "--out", "run"], p);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!p.join("run").exists());
}
