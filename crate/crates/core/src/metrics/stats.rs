use rand::Rng;

use super::MetricsError;
use crate::rng;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci(
    samples: &[f64],
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<(f64, f64), MetricsError> {
    if samples.len() < 2 {
        return Err(MetricsError::Argument(format!(
            "bootstrap needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if n_resamples < 100 {
        return Err(MetricsError::Argument(format!("n_resamples must be ≥ 100, got {n_resamples}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::Argument(format!("level must lie in (0, 1), got {level}")));
    }
    let n = samples.len();
    let mut r = rng::stream(seed, "bootstrap", &[]);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| samples[r.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok((percentile(&means, alpha), percentile(&means, 1.0 - alpha)))
}

/// Fraction of pairs in which the first value wins; exact ties count half.
pub fn paired_win_probability(pairs: &[(f64, f64)], lower_is_better: bool) -> Result<f64, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty("pairs"));
    }
    let score: f64 = pairs
        .iter()
        .map(|&(a, b)| {
            if a == b {
                0.5
            } else if (a < b) == lower_is_better {
                1.0
            } else {
                0.0
            }
        })
        .sum();
    Ok(score / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn win_probability_examples() {
        assert_eq!(paired_win_probability(&[(1.0, 2.0), (3.0, 2.0), (2.0, 2.0)], true).unwrap(), 0.5);
        assert_eq!(paired_win_probability(&[(1.0, 2.0), (0.0, 2.0)], true).unwrap(), 1.0);
        assert_eq!(paired_win_probability(&[(1.0, 2.0), (0.0, 2.0)], false).unwrap(), 0.0);
        assert_eq!(paired_win_probability(&[(2.0, 2.0); 4], true).unwrap(), 0.5);
        assert!(paired_win_probability(&[], true).is_err());
    }

    #[test]
    fn bootstrap_basics() {
        assert_eq!(bootstrap_ci(&[3.0; 5], 500, 0.95, 1).unwrap(), (3.0, 3.0));
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (lo, hi) = bootstrap_ci(&xs, 1000, 0.95, 1).unwrap();
        assert!(lo <= 3.0 && 3.0 <= hi);
        assert_eq!(bootstrap_ci(&xs, 1000, 0.95, 1).unwrap(), (lo, hi));
        assert!(bootstrap_ci(&[1.0], 1000, 0.95, 1).is_err());
        assert!(bootstrap_ci(&xs, 10, 0.95, 1).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let s = [1.0, 2.0, 4.0];
        assert_eq!(percentile(&s, 0.0), 1.0);
        assert_eq!(percentile(&s, 0.5), 2.0);
        assert_eq!(percentile(&s, 0.75), 3.0);
        assert_eq!(percentile(&s, 1.0), 4.0);
    }
}
