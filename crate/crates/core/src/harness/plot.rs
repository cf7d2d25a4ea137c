//! CSV and SVG renderings of a step log and an evaluation report.

use std::fmt::Write as _;

use super::EvalReport;
use crate::condense::StepLog;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

/// Polyline vertices for `values` in SVG coordinates (y grows downwards).
pub fn polyline_points(values: &[f64]) -> Vec<(f64, f64)> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = values.len();
    let inner_w = WIDTH - 2.0 * MARGIN;
    let inner_h = HEIGHT - 2.0 * MARGIN;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = if n == 1 {
                MARGIN
            } else {
                MARGIN + inner_w * i as f64 / (n - 1) as f64
            };
            let y = HEIGHT - MARGIN - inner_h * (v - lo) / span;
            (x, y)
        })
        .collect()
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Objective against step; an empty log yields axes without a series.
pub fn objective_svg(log: &StepLog) -> String {
    let mut s = svg_open("objective per step");
    let pts = polyline_points(&log.objectives());
    if !pts.is_empty() {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.3},{y:.3}")).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn objective_csv(log: &StepLog) -> String {
    let mut s = String::from("step,objective\n");
    for r in &log.records {
        let _ = writeln!(s, "{},{}", r.step, r.objective);
    }
    s
}

/// One row per architecture: synthetic mean and std, then the baseline.
pub fn accuracy_csv(report: &EvalReport) -> String {
    let mut s = String::from("architecture,synthetic_mean,synthetic_std,baseline_mean,baseline_std\n");
    for a in &report.architectures {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            a.name, a.synthetic.mean, a.synthetic.std, a.baseline.mean, a.baseline.std
        );
    }
    s
}

/// Paired bars (synthetic, baseline) per architecture on a [0, 1] axis.
pub fn accuracy_svg(report: &EvalReport) -> String {
    let mut s = svg_open("accuracy on held-out data");
    let n = report.architectures.len();
    if n > 0 {
        let inner_w = WIDTH - 2.0 * MARGIN;
        let inner_h = HEIGHT - 2.0 * MARGIN;
        let slot = inner_w / n as f64;
        let bar = slot / 3.0;
        for (i, a) in report.architectures.iter().enumerate() {
            let x0 = MARGIN + slot * i as f64 + bar / 2.0;
            for (k, (v, color)) in [(a.synthetic.mean, "steelblue"), (a.baseline.mean, "gray")].iter().enumerate() {
                let h = inner_h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect class="series" x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{color}"/>"#,
                    x0 + bar * k as f64,
                    HEIGHT - MARGIN - h,
                    bar,
                    h
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
                x0 + bar,
                HEIGHT - MARGIN + 16.0,
                escape(&a.name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// File name and contents of every plot artifact.
pub fn emit_plots(report: Option<&EvalReport>, log: &StepLog) -> Vec<(String, Vec<u8>)> {
    let mut out = vec![
        ("objective.csv".to_string(), objective_csv(log).into_bytes()),
        ("objective.svg".to_string(), objective_svg(log).into_bytes()),
    ];
    if let Some(r) = report {
        out.push(("accuracy.csv".to_string(), accuracy_csv(r).into_bytes()));
        out.push(("accuracy.svg".to_string(), accuracy_svg(r).into_bytes()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condense::StepRecord;

    fn log(values: &[f64]) -> StepLog {
        StepLog {
            terms: Vec::new(),
            records: values
                .iter()
                .enumerate()
                .map(|(step, &v)| StepRecord {
                    step,
                    objective: v,
                    method: v,
                    terms: Vec::new(),
                    grad_norm: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn empty_log_has_no_series() {
        let svg = objective_svg(&StepLog::default());
        assert!(svg.starts_with("<svg"));
        assert!(!svg.contains("class=\"series\""));
        assert_eq!(objective_csv(&StepLog::default()), "step,objective\n");
    }

    #[test]
    fn decreasing_log_gives_monotone_polyline() {
        let pts = polyline_points(&[5.0, 4.0, 2.5, 2.5, 0.1]);
        for w in pts.windows(2) {
            assert!(w[1].0 > w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        assert_eq!(objective_svg(&log(&[3.0, 2.0])), objective_svg(&log(&[3.0, 2.0])));
    }
}
