//! Scalar observables of token geometry.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{svd, DEFAULT_RANK_TOL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("row {row} is zero; cosine quantities are undefined")]
    ZeroRow { row: usize },
    #[error("stable rank of the zero matrix is undefined")]
    ZeroMatrix,
}

/// Tolerance for "all rows equal" assertions on `mu`.
pub fn collapse_tolerance(x: &DMatrix<f64>) -> f64 {
    1e-10 * x.norm().max(1.0)
}

/// Distance to the row-mean rank-one matrix: `||X - 1 (1^T X / N)||_F`.
pub fn mu(x: &DMatrix<f64>) -> f64 {
    let mean = x.row_mean();
    x.row_iter()
        .map(|r| (r - &mean).norm_squared())
        .sum::<f64>()
        .sqrt()
}

fn normalized_rows(x: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricsError> {
    let mut out = x.clone();
    for (row, mut r) in out.row_iter_mut().enumerate() {
        let norm = r.norm();
        if norm == 0.0 {
            return Err(MetricsError::ZeroRow { row });
        }
        r /= norm;
    }
    Ok(out)
}

/// Minimum pairwise cosine similarity over `i < j`. A single token gives 1.
pub fn min_pairwise_cos(x: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let u = normalized_rows(x)?;
    let gram = &u * u.transpose();
    let n = x.nrows();
    let mut phi: f64 = 1.0;
    for i in 0..n {
        for j in i + 1..n {
            phi = phi.min(gram[(i, j)]);
        }
    }
    Ok(phi.clamp(-1.0, 1.0))
}

/// `1 - phi`, evaluated as `max ||u_i - u_j||^2 / 2` over normalized rows so
/// that it keeps relative accuracy when tokens are nearly aligned.
pub fn one_minus_phi(x: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let u = normalized_rows(x)?;
    let n = x.nrows();
    let mut gap: f64 = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            gap = gap.max((u.row(i) - u.row(j)).norm_squared() / 2.0);
        }
    }
    Ok(gap)
}

/// `||X||_F^2 / ||X||_2^2`.
pub fn stable_rank(x: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let s = svd(x).singular_values;
    stable_rank_from_singular_values(&s)
}

fn stable_rank_from_singular_values(s: &[f64]) -> Result<f64, MetricsError> {
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Err(MetricsError::ZeroMatrix);
    }
    Ok(s.iter().map(|v| (v / top).powi(2)).sum())
}

/// Mean of `|cos(X_i, X_j)|` over `i < j`. A single token gives 1.
pub fn mean_abs_cos(x: &DMatrix<f64>) -> Result<f64, MetricsError> {
    let u = normalized_rows(x)?;
    let n = x.nrows();
    if n < 2 {
        return Ok(1.0);
    }
    let gram = &u * u.transpose();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += gram[(i, j)].abs().min(1.0);
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// `max_i x_i - min_i x_i`; zero for an empty vector.
pub fn column_oscillation(x: &[f64]) -> f64 {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if x.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

pub fn column_oscillations(x: &DMatrix<f64>) -> Vec<f64> {
    x.column_iter()
        .map(|c| column_oscillation(c.as_slice()))
        .collect()
}

/// Metrics recorded for one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub mu: f64,
    pub phi: f64,
    pub stable_rank: f64,
    pub sigma_min: f64,
    pub rank: usize,
    pub mean_abs_cos: f64,
    pub sigma2_over_sigma1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oscillation: Option<Vec<f64>>,
}

impl MetricsRow {
    pub fn compute(x: &DMatrix<f64>, with_oscillation: bool) -> Result<Self, MetricsError> {
        let s = svd(x).singular_values;
        let top = s.first().copied().unwrap_or(0.0);
        let rank = if top > 0.0 {
            s.iter().filter(|&&v| v > DEFAULT_RANK_TOL * top).count()
        } else {
            0
        };
        let sigma2_over_sigma1 = match (s.first(), s.get(1)) {
            (Some(&a), Some(&b)) if a > 0.0 => b / a,
            _ => 0.0,
        };
        Ok(Self {
            mu: mu(x),
            phi: min_pairwise_cos(x)?,
            stable_rank: stable_rank_from_singular_values(&s)?,
            sigma_min: s.last().copied().unwrap_or(0.0),
            rank,
            mean_abs_cos: mean_abs_cos(x)?,
            sigma2_over_sigma1,
            oscillation: with_oscillation.then(|| column_oscillations(x)),
        })
    }
}

#[cfg(test)]
/// Applies a row-stochastic matrix to a vector: `A x`.
pub(crate) fn apply(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (a * nalgebra::DVector::from_column_slice(x))
        .iter()
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    /// Pairwise form of mu: sqrt((1/2N) sum_{i,j} ||X_i - X_j||^2).
    fn mu_pairwise(x: &DMatrix<f64>) -> f64 {
        let n = x.nrows();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                total += (x.row(i) - x.row(j)).norm_squared();
            }
        }
        (total / (2.0 * n as f64)).sqrt()
    }

    #[test]
    fn mu_examples() {
        assert!(mu(&m(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]])) < 1e-15);
        // gamma = (0, 0), residual rows (1, 0) and (-1, 0)
        assert!((mu(&m(&[&[1.0, 0.0], &[-1.0, 0.0]])) - 2f64.sqrt()).abs() < 1e-15);
        assert!((mu_pairwise(&m(&[&[1.0, 0.0], &[-1.0, 0.0]])) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn phi_examples() {
        assert_eq!(
            min_pairwise_cos(&m(&[&[0.6, 0.8], &[0.6, 0.8]])).unwrap(),
            1.0
        );
        assert_eq!(
            min_pairwise_cos(&m(&[&[0.0, 1.0], &[0.0, -1.0]])).unwrap(),
            -1.0
        );
        assert_eq!(min_pairwise_cos(&DMatrix::identity(3, 3)).unwrap(), 0.0);
        assert_eq!(
            min_pairwise_cos(&m(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(MetricsError::ZeroRow { row: 1 })
        );
    }

    #[test]
    fn one_minus_phi_matches_direct_form() {
        let x = m(&[&[1.0, 0.2, 0.0], &[0.3, 1.0, -0.2], &[-0.1, 0.4, 1.0]]);
        let direct = 1.0 - min_pairwise_cos(&x).unwrap();
        assert!((one_minus_phi(&x).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn stable_rank_examples() {
        assert!((stable_rank(&DMatrix::identity(4, 4)).unwrap() - 4.0).abs() < 1e-12);
        let r1 = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!((stable_rank(&r1).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            stable_rank(&DMatrix::zeros(2, 2)),
            Err(MetricsError::ZeroMatrix)
        );
    }

    #[test]
    fn mean_abs_cos_examples() {
        assert!((mean_abs_cos(&m(&[&[1.0, 1.0], &[2.0, 2.0]])).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mean_abs_cos(&DMatrix::identity(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn oscillation_examples() {
        assert_eq!(column_oscillation(&[2.0, 2.0, 2.0]), 0.0);
        assert_eq!(column_oscillation(&[0.0, 1.0]), 1.0);
        assert_eq!(column_oscillation(&[]), 0.0);
        let a = m(&[&[0.5, 0.5, 0.0], &[0.2, 0.3, 0.5], &[0.0, 0.0, 1.0]]);
        let x = [3.0, -1.0, 0.5];
        assert!(column_oscillation(&apply(&a, &x)) <= column_oscillation(&x));
    }

    #[test]
    fn metrics_row_for_identity() {
        let row = MetricsRow::compute(&DMatrix::identity(3, 3), true).unwrap();
        assert_eq!(row.rank, 3);
        assert_eq!(row.phi, 0.0);
        assert!((row.stable_rank - 3.0).abs() < 1e-12);
        assert_eq!(row.sigma2_over_sigma1, 1.0);
        assert_eq!(row.oscillation, Some(vec![1.0, 1.0, 1.0]));
    }
}
