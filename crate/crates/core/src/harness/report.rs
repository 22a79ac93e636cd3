use std::fmt::Write;

use super::compare::{CompareReport, Summary};
use super::heads::HeadsPoint;

fn fmt_summary(s: &Summary) -> String {
    match (s.ci_low, s.ci_high) {
        (Some(lo), Some(hi)) => format!("{:.4} [{lo:.4}, {hi:.4}]", s.mean),
        _ => format!("{:.4}", s.mean),
    }
}

fn fmt_win(p: f64, lo: Option<f64>, hi: Option<f64>) -> String {
    match (lo, hi) {
        (Some(lo), Some(hi)) => format!("{p:.3} [{lo:.3}, {hi:.3}]"),
        _ => format!("{p:.3}"),
    }
}

/// Markdown summary of a comparison, optionally with head-distance series
/// labelled by run.
pub fn render_report(report: &CompareReport, heads: &[(String, Vec<HeadsPoint>)]) -> String {
    let mut out = String::from("# Results\n\n");
    let _ = writeln!(
        out,
        "Intervals are {:.0}% percentile bootstrap intervals ({} resamples, seed {}).\n",
        report.level * 100.0,
        report.n_resamples,
        report.seed
    );
    for (exp, metrics) in &report.experiments {
        let _ = writeln!(out, "## {exp}\n");
        for (metric, m) in metrics {
            let dir = if m.lower_is_better { "lower is better" } else { "higher is better" };
            let _ = writeln!(out, "### {metric} ({dir})\n");
            out.push_str("| steps | pairs | iLM | eLM | P(iLM better) |\n|---|---|---|---|---|\n");
            for s in &m.by_steps {
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    s.steps,
                    s.win.n_pairs,
                    fmt_summary(&s.ilm),
                    fmt_summary(&s.elm),
                    fmt_win(s.win.win_probability, s.win.ci_low, s.win.ci_high)
                );
            }
            let _ = writeln!(
                out,
                "| all | {} | {} | {} | {} |\n",
                m.win.n_pairs,
                fmt_summary(&m.ilm),
                fmt_summary(&m.elm),
                fmt_win(m.win.win_probability, m.win.ci_low, m.win.ci_high)
            );
        }
    }
    if !heads.is_empty() {
        out.push_str("## Head distances\n\n| run | step | D_in | D_out |\n|---|---|---|---|\n");
        for (label, points) in heads {
            for p in points {
                let _ = writeln!(out, "| {label} | {} | {:.5} | {:.5} |", p.step, p.d_in, p.d_out);
            }
        }
        out.push('\n');
    }
    if !report.unmatched.is_empty() {
        let _ = writeln!(out, "## Excluded rows\n");
        for u in &report.unmatched {
            let _ = writeln!(out, "- {u}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::compare::compare_records;
    use crate::metrics::MetricsRecord;

    #[test]
    fn renders_tables() {
        let rows: Vec<MetricsRecord> = (0..3u64)
            .flat_map(|s| {
                ["ilm", "elm"].map(|v| MetricsRecord {
                    experiment: "ood_n3".into(),
                    variant: v.into(),
                    config_hash: "h".into(),
                    seed: s,
                    steps: 50,
                    metric: "perplexity".into(),
                    value: if v == "ilm" { 1.0 } else { 2.0 },
                    ci_low: None,
                    ci_high: None,
                })
            })
            .collect();
        let r = compare_records(&rows, 0, 200, 0.95).unwrap();
        let md = render_report(&r, &[("r0".into(), vec![HeadsPoint { step: 0, d_in: 0.0, d_out: 0.0 }])]);
        assert!(md.contains("## ood_n3"));
        assert!(md.contains("| 50 | 3 | 1.0000 [1.0000, 1.0000] | 2.0000 [2.0000, 2.0000] | 1.000 [1.000, 1.000] |"));
        assert!(md.contains("| r0 | 0 | 0.00000 | 0.00000 |"));
    }
}
