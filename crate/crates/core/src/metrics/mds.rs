use rand::Rng;

use super::{check_distance_matrix, MetricsError};
use crate::rng;

const TOL: f64 = 1e-10;
const MAX_ITER: usize = 10_000;

fn matvec(a: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(v).map(|(x, y)| x * y).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dominant eigenpair of the symmetric matrix `a + shift·I`, with the shift
/// removed from the returned eigenvalue.
fn power_iteration(a: &[Vec<f64>], shift: f64, start: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len();
    let mut v = start.to_vec();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITER {
        let mut w = matvec(a, &v);
        for i in 0..n {
            w[i] += shift * v[i];
        }
        let new_lambda: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let len = norm(&w);
        if len < 1e-300 {
            return (-shift, v);
        }
        w.iter_mut().for_each(|x| *x /= len);
        let delta = w.iter().zip(&v).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        v = w;
        let converged = (new_lambda - lambda).abs() <= TOL * new_lambda.abs().max(1.0) && delta <= 1e-8;
        lambda = new_lambda;
        if converged {
            break;
        }
    }
    (lambda - shift, v)
}

/// Classical (Torgerson) multidimensional scaling into `dim` coordinates.
///
/// Coordinates are defined up to sign and rotation; only the pairwise
/// distances between the returned points are meaningful.
pub fn classical_mds(dist: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>, MetricsError> {
    check_distance_matrix(dist)?;
    let n = dist.len();
    if n == 0 {
        return Err(MetricsError::Empty("distance matrix"));
    }
    if dim == 0 {
        return Err(MetricsError::Argument("dim must be positive".into()));
    }
    // B = −½ J D² J
    let sq: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|x| x * x).collect()).collect();
    let row_mean: Vec<f64> = sq.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut b: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| -0.5 * (sq[i][j] - row_mean[i] - row_mean[j] + grand)).collect())
        .collect();

    let mut start_rng = rng::stream(0, "mds-start", &[]);
    let mut coords = vec![vec![0.0; dim]; n];
    for k in 0..dim.min(n) {
        let start: Vec<f64> = (0..n).map(|_| start_rng.random_range(-1.0..1.0)).collect();
        let (mut lambda, mut v) = power_iteration(&b, 0.0, &start);
        if lambda < 0.0 {
            // dominant in magnitude but negative: shift so the top of the
            // spectrum dominates
            (lambda, v) = power_iteration(&b, lambda.abs(), &start);
        }
        if lambda > 0.0 {
            let scale = lambda.sqrt();
            for i in 0..n {
                coords[i][k] = v[i] * scale;
            }
        }
        for i in 0..n {
            for j in 0..n {
                b[i][j] -= lambda * v[i] * v[j];
            }
        }
    }
    Ok(coords)
}
