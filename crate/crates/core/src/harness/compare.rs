use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::eval::{metric_lower_is_better, ELM, ILM};
use super::{svg, HarnessError};
use crate::metrics::{bootstrap_ci, mean, paired_win_probability, read_metrics_csv, MetricsRecord};
use crate::rng;

/// Mean with a percentile bootstrap interval; the interval is absent for
/// fewer than two samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinSummary {
    pub n_pairs: usize,
    /// Probability that iLM scores better than its matched eLM run.
    pub win_probability: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub steps: u64,
    pub ilm: Summary,
    pub elm: Summary,
    pub win: WinSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub lower_is_better: bool,
    pub ilm: Summary,
    pub elm: Summary,
    pub win: WinSummary,
    pub by_steps: Vec<StepSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub n_resamples: usize,
    pub level: f64,
    /// experiment → metric → summary
    pub experiments: BTreeMap<String, BTreeMap<String, MetricSummary>>,
    /// Records without a partner of the other variant, excluded above.
    pub unmatched: Vec<String>,
}

type PairKey = (String, String, String, u64, u64);

struct Stats {
    seed: u64,
    n_resamples: usize,
    level: f64,
}

impl Stats {
    fn summary(&self, values: &[f64], tag: &str) -> Result<Summary, HarnessError> {
        let (ci_low, ci_high) = if values.len() >= 2 {
            let (lo, hi) = bootstrap_ci(values, self.n_resamples, self.level, rng::derive_seed(self.seed, tag, &[]))?;
            (Some(lo), Some(hi))
        } else {
            (None, None)
        };
        Ok(Summary {
            n: values.len(),
            mean: mean(values),
            ci_low,
            ci_high,
        })
    }

    fn win(&self, pairs: &[(f64, f64)], lower_is_better: bool, tag: &str) -> Result<WinSummary, HarnessError> {
        let wp = paired_win_probability(pairs, lower_is_better)?;
        let indicators: Vec<f64> = pairs
            .iter()
            .map(|p| paired_win_probability(std::slice::from_ref(p), lower_is_better))
            .collect::<Result<_, _>>()?;
        let s = self.summary(&indicators, tag)?;
        Ok(WinSummary {
            n_pairs: pairs.len(),
            win_probability: wp,
            ci_low: s.ci_low,
            ci_high: s.ci_high,
        })
    }

    fn metric(&self, name: &str, pairs: &[(u64, f64, f64)], lower_is_better: bool) -> Result<MetricSummary, HarnessError> {
        let split = |sel: &[(u64, f64, f64)]| -> (Vec<f64>, Vec<f64>, Vec<(f64, f64)>) {
            (
                sel.iter().map(|p| p.1).collect(),
                sel.iter().map(|p| p.2).collect(),
                sel.iter().map(|p| (p.1, p.2)).collect(),
            )
        };
        let (i, e, both) = split(pairs);
        let mut by_steps = Vec::new();
        let mut steps: Vec<u64> = pairs.iter().map(|p| p.0).collect();
        steps.sort_unstable();
        steps.dedup();
        for s in steps {
            let sel: Vec<(u64, f64, f64)> = pairs.iter().filter(|p| p.0 == s).copied().collect();
            let (si, se, sb) = split(&sel);
            by_steps.push(StepSummary {
                steps: s,
                ilm: self.summary(&si, &format!("{name}/{s}/{ILM}"))?,
                elm: self.summary(&se, &format!("{name}/{s}/{ELM}"))?,
                win: self.win(&sb, lower_is_better, &format!("{name}/{s}/win"))?,
            });
        }
        Ok(MetricSummary {
            lower_is_better,
            ilm: self.summary(&i, &format!("{name}/all/{ILM}"))?,
            elm: self.summary(&e, &format!("{name}/all/{ELM}"))?,
            win: self.win(&both, lower_is_better, &format!("{name}/all/win"))?,
            by_steps,
        })
    }
}

/// Pairs iLM and eLM rows on (experiment, config hash, seed, steps, metric)
/// and summarises every experiment and metric.
pub fn compare_records(
    records: &[MetricsRecord],
    seed: u64,
    n_resamples: usize,
    level: f64,
) -> Result<CompareReport, HarnessError> {
    let mut slots: BTreeMap<PairKey, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for r in records {
        let key = (r.experiment.clone(), r.metric.clone(), r.config_hash.clone(), r.seed, r.steps);
        let slot = slots.entry(key).or_default();
        let target = match r.variant.as_str() {
            ILM => &mut slot.0,
            ELM => &mut slot.1,
            other => {
                warn!("ignoring row with unknown variant {other:?}");
                continue;
            }
        };
        if target.replace(r.value).is_some() {
            return Err(HarnessError::Invalid(format!(
                "duplicate {} row for {} {} seed {} at {} steps",
                r.variant, r.experiment, r.metric, r.seed, r.steps
            )));
        }
    }
    let mut grouped: BTreeMap<(String, String), Vec<(u64, f64, f64)>> = BTreeMap::new();
    let mut unmatched = Vec::new();
    for ((exp, metric, hash, seed, steps), slot) in slots {
        match slot {
            (Some(i), Some(e)) => grouped.entry((exp, metric)).or_default().push((steps, i, e)),
            (i, _) => unmatched.push(format!(
                "{exp} {metric} {hash} seed {seed} steps {steps}: missing {}",
                if i.is_some() { ELM } else { ILM }
            )),
        }
    }
    if !unmatched.is_empty() {
        warn!("{} unmatched rows excluded", unmatched.len());
    }
    if grouped.is_empty() {
        return Err(HarnessError::NoPairs);
    }
    let stats = Stats {
        seed,
        n_resamples,
        level,
    };
    let mut experiments: BTreeMap<String, BTreeMap<String, MetricSummary>> = BTreeMap::new();
    for ((exp, metric), pairs) in grouped {
        let summary = stats.metric(&format!("{exp}/{metric}"), &pairs, metric_lower_is_better(&metric))?;
        experiments.entry(exp).or_default().insert(metric, summary);
    }
    Ok(CompareReport {
        seed,
        n_resamples,
        level,
        experiments,
        unmatched,
    })
}

pub fn compare(metrics_csv: &Path, seed: u64, n_resamples: usize, level: f64) -> Result<CompareReport, HarnessError> {
    compare_records(&read_metrics_csv(metrics_csv)?, seed, n_resamples, level)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Invalid(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))
}

fn summary_cells(s: &Summary) -> Vec<String> {
    vec![s.n.to_string(), s.mean.to_string(), opt(s.ci_low), opt(s.ci_high)]
}

/// Writes `report.json`, one CSV per panel and the SVG renderings into `dir`.
pub fn write_compare_outputs(dir: &Path, report: &CompareReport) -> Result<Vec<PathBuf>, HarnessError> {
    let mut overall = Vec::new();
    let mut by_steps = Vec::new();
    let mut wins = Vec::new();
    for (exp, metrics) in &report.experiments {
        for (metric, m) in metrics {
            for (variant, s) in [(ILM, &m.ilm), (ELM, &m.elm)] {
                let mut row = vec![exp.clone(), metric.clone(), variant.to_string()];
                row.extend(summary_cells(s));
                overall.push(row);
            }
            let win_row = |steps: String, w: &WinSummary| {
                vec![
                    exp.clone(),
                    metric.clone(),
                    steps,
                    w.n_pairs.to_string(),
                    w.win_probability.to_string(),
                    opt(w.ci_low),
                    opt(w.ci_high),
                ]
            };
            wins.push(win_row("all".into(), &m.win));
            for st in &m.by_steps {
                for (variant, s) in [(ILM, &st.ilm), (ELM, &st.elm)] {
                    let mut row = vec![exp.clone(), metric.clone(), st.steps.to_string(), variant.to_string()];
                    row.extend(summary_cells(s));
                    by_steps.push(row);
                }
                wins.push(win_row(st.steps.to_string(), &st.win));
            }
        }
    }
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<(), HarnessError> {
        let path = dir.join(name);
        crate::corpus::write_bytes_atomic(&path, &bytes)?;
        written.push(path);
        Ok(())
    };
    let mut json = serde_json::to_vec_pretty(report).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    json.push(b'\n');
    put("report.json", json)?;
    put(
        "panel_overall.csv",
        csv_bytes(&["experiment", "metric", "variant", "n", "mean", "ci_low", "ci_high"], overall)?,
    )?;
    put(
        "panel_steps.csv",
        csv_bytes(&["experiment", "metric", "steps", "variant", "n", "mean", "ci_low", "ci_high"], by_steps)?,
    )?;
    put(
        "panel_win.csv",
        csv_bytes(
            &["experiment", "metric", "steps", "n_pairs", "win_probability", "ci_low", "ci_high"],
            wins,
        )?,
    )?;
    for (exp, metrics) in &report.experiments {
        for (metric, m) in metrics {
            put(&format!("{exp}_{metric}_steps.svg"), svg::steps_chart(&format!("{exp}: {metric}"), m).into_bytes())?;
        }
    }
    put("win_probability.svg", svg::win_chart(report).into_bytes())?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(variant: &str, seed: u64, steps: u64, value: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: "structured_noise".into(),
            variant: variant.into(),
            config_hash: "h".into(),
            seed,
            steps,
            metric: "perplexity".into(),
            value,
            ci_low: None,
            ci_high: None,
        }
    }

    #[test]
    fn identical_metrics_give_even_odds() {
        let rows: Vec<MetricsRecord> = (0..4)
            .flat_map(|s| [rec(ILM, s, 10, 3.0 + s as f64), rec(ELM, s, 10, 3.0 + s as f64)])
            .collect();
        let r = compare_records(&rows, 0, 1000, 0.95).unwrap();
        let m = &r.experiments["structured_noise"]["perplexity"];
        assert_eq!(m.win.win_probability, 0.5);
        assert_eq!(m.ilm.mean, m.elm.mean);
        assert_eq!((m.win.ci_low, m.win.ci_high), (Some(0.5), Some(0.5)));
    }

    #[test]
    fn three_pairs_match_hand_computation() {
        // iLM wins seed 0, loses seed 1, ties seed 2
        let rows = vec![
            rec(ILM, 0, 100, 2.0),
            rec(ELM, 0, 100, 3.0),
            rec(ILM, 1, 100, 5.0),
            rec(ELM, 1, 100, 4.0),
            rec(ILM, 2, 200, 1.0),
            rec(ELM, 2, 200, 1.0),
        ];
        let r = compare_records(&rows, 0, 1000, 0.95).unwrap();
        let m = &r.experiments["structured_noise"]["perplexity"];
        assert_eq!(m.win.n_pairs, 3);
        assert!((m.win.win_probability - 0.5).abs() < 1e-12);
        assert!((m.ilm.mean - 8.0 / 3.0).abs() < 1e-12);
        assert!((m.elm.mean - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.by_steps.len(), 2);
        assert_eq!(m.by_steps[0].win.win_probability, 0.5);
        assert_eq!(m.by_steps[0].ilm.mean, 3.5);
        assert_eq!(m.by_steps[1].win.n_pairs, 1);
        assert_eq!(m.by_steps[1].ilm.ci_low, None);
        assert!(r.unmatched.is_empty());
    }

    #[test]
    fn unmatched_rows_are_listed_and_excluded() {
        let rows = vec![rec(ILM, 0, 1, 2.0), rec(ELM, 0, 1, 3.0), rec(ILM, 9, 1, 1.0)];
        let r = compare_records(&rows, 0, 1000, 0.95).unwrap();
        assert_eq!(r.unmatched.len(), 1);
        assert!(r.unmatched[0].contains("seed 9"));
        assert_eq!(r.experiments["structured_noise"]["perplexity"].win.n_pairs, 1);
    }

    #[test]
    fn empty_pair_set_is_an_error() {
        assert!(matches!(compare_records(&[], 0, 1000, 0.95), Err(HarnessError::NoPairs)));
        assert!(matches!(
            compare_records(&[rec(ILM, 0, 1, 1.0)], 0, 1000, 0.95),
            Err(HarnessError::NoPairs)
        ));
    }

    #[test]
    fn outputs_are_written() {
        let rows: Vec<MetricsRecord> = (0..3).flat_map(|s| [rec(ILM, s, 10, 1.0), rec(ELM, s, 10, 2.0)]).collect();
        let r = compare_records(&rows, 0, 1000, 0.95).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_compare_outputs(dir.path(), &r).unwrap();
        assert_eq!(files.len(), 6);
        let win = std::fs::read_to_string(dir.path().join("panel_win.csv")).unwrap();
        assert!(win.contains("structured_noise,perplexity,all,3,1,1,1\n"), "{win}");
        let back: CompareReport =
            serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
