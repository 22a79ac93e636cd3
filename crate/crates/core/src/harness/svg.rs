//! Minimal SVG charts. The CSV panels are authoritative; these are for a
//! quick look.

use std::fmt::Write;

use super::compare::{CompareReport, MetricSummary};

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, y_lo: f64, y_hi: f64) {
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\
         <text x=\"{t}\" y=\"{b}\" text-anchor=\"end\">{y_lo:.3}</text>\
         <text x=\"{t}\" y=\"{PAD}\" text-anchor=\"end\">{y_hi:.3}</text>",
        b = H - PAD,
        r = W - PAD / 2.0,
        t = PAD - 4.0,
    );
}

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        (a + b) / 2.0
    }
}

/// Mean metric against training steps for both variants, with interval bars.
pub(crate) fn steps_chart(title: &str, m: &MetricSummary) -> String {
    let mut out = header(title);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &m.by_steps {
        for v in [&s.ilm, &s.elm] {
            lo = lo.min(v.ci_low.unwrap_or(v.mean));
            hi = hi.max(v.ci_high.unwrap_or(v.mean));
        }
    }
    axes(&mut out, lo, hi);
    let n = m.by_steps.len();
    let x_of = |i: usize| scale(i as f64, 0.0, (n.max(2) - 1) as f64, PAD + 20.0, W - PAD);
    let y_of = |v: f64| scale(v, lo, hi, H - PAD, PAD);
    for (i, s) in m.by_steps.iter().enumerate() {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x_of(i),
            H - PAD + 14.0,
            s.steps
        );
    }
    for (name, colour, pick) in [
        ("ilm", "#1f77b4", 0usize),
        ("elm", "#d62728", 1usize),
    ] {
        let pts: Vec<String> = m
            .by_steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let v = if pick == 0 { &s.ilm } else { &s.elm };
                format!("{:.1},{:.1}", x_of(i), y_of(v.mean))
            })
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        for (i, s) in m.by_steps.iter().enumerate() {
            let v = if pick == 0 { &s.ilm } else { &s.elm };
            if let (Some(a), Some(b)) = (v.ci_low, v.ci_high) {
                let _ = writeln!(
                    out,
                    "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"{colour}\"/>",
                    y_of(a),
                    y_of(b),
                    x = x_of(i) + if pick == 0 { -3.0 } else { 3.0 }
                );
            }
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{colour}\">{name}</text>",
            W - PAD - 30.0,
            PAD + 14.0 * pick as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One bar per (experiment, metric): the overall win probability.
pub(crate) fn win_chart(report: &CompareReport) -> String {
    let mut out = header("P(iLM better than eLM)");
    axes(&mut out, 0.0, 1.0);
    let bars: Vec<(String, f64)> = report
        .experiments
        .iter()
        .flat_map(|(e, ms)| ms.iter().map(move |(m, s)| (format!("{e} {m}"), s.win.win_probability)))
        .collect();
    let slot = (W - 1.5 * PAD) / bars.len().max(1) as f64;
    let half = scale(0.5, 0.0, 1.0, H - PAD, PAD);
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{half:.1}\" x2=\"{}\" y2=\"{half:.1}\" stroke=\"gray\" stroke-dasharray=\"4\"/>",
        W - PAD / 2.0
    );
    for (i, (label, p)) in bars.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        let top = scale(*p, 0.0, 1.0, H - PAD, PAD);
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#1f77b4\"/>\
             <text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\">{}</text>",
            slot * 0.7,
            H - PAD - top,
            x + slot * 0.35,
            H - PAD + 14.0 + 10.0 * (i % 2) as f64,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
