//! Dense kernels, seeded randomness and initial-condition samplers.
//!
//! Everything here works on small `nalgebra::DMatrix<f64>` values. Token
//! states are wrapped in [`TokenMatrix`], which guarantees finite entries.

mod linalg;
mod rng;
mod sampling;

use std::io::{self, Write};
use std::ops::Deref;

use nalgebra::DMatrix;
use thiserror::Error;

pub use linalg::{
    gaussian_matrix, min_singular, numerical_rank, power_iteration_norm, random_orthogonal,
    spectral_norm, svd, SvdResult, DEFAULT_RANK_TOL,
};
pub use rng::{seeded_rng, split_rng, SeededRng};
pub use sampling::{
    sample_hemisphere_rows, sample_hemisphere_rows_with_budget, sample_sphere_rows,
    DEFAULT_HEMISPHERE_BUDGET,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("token matrix must have at least one row and one column")]
    Empty,
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("rows have inconsistent lengths")]
    Ragged,
    #[error("hemisphere sampler exhausted its retry budget after {attempts} attempts")]
    RetryBudgetExhausted { attempts: usize },
}

/// An `N x d` token state; row `i` is token `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix(DMatrix<f64>);

impl TokenMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self, NumericsError> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(NumericsError::Empty);
        }
        for col in 0..values.ncols() {
            for row in 0..values.nrows() {
                if !values[(row, col)].is_finite() {
                    return Err(NumericsError::NonFinite { row, col });
                }
            }
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(NumericsError::Ragged);
        }
        Self::new(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn n_tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.norm()).collect()
    }

    /// True when every row has 2-norm within `tol` of one.
    pub fn has_unit_rows(&self, tol: f64) -> bool {
        self.row_norms().iter().all(|n| (n - 1.0).abs() <= tol)
    }

    pub fn row_vec(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }
}

impl Deref for TokenMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Header line for snapshot CSVs: `t,i,x_1,...,x_d`.
pub fn snapshot_csv_header(d: usize) -> String {
    let mut header = String::from("t,i");
    for j in 1..=d {
        header.push_str(&format!(",x_{j}"));
    }
    header
}

/// Appends one row per token for step `t`. Token indices are written 1-based.
pub fn write_snapshot_rows<W: Write>(out: &mut W, t: usize, x: &TokenMatrix) -> io::Result<()> {
    for i in 0..x.n_tokens() {
        write!(out, "{t},{}", i + 1)?;
        for v in x.row(i).iter() {
            write!(out, ",{v:e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert_eq!(
            TokenMatrix::new(m),
            Err(NumericsError::NonFinite { row: 0, col: 1 })
        );
        assert_eq!(
            TokenMatrix::new(DMatrix::zeros(0, 3)),
            Err(NumericsError::Empty)
        );
        assert_eq!(
            TokenMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]),
            Err(NumericsError::Ragged)
        );
    }

    #[test]
    fn snapshot_csv_layout() {
        let x = TokenMatrix::from_rows(&[vec![0.5, -1.0], vec![0.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        writeln!(buf, "{}", snapshot_csv_header(2)).unwrap();
        write_snapshot_rows(&mut buf, 3, &x).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,i,x_1,x_2\n3,1,5e-1,-1e0\n3,2,0e0,2e0\n");
    }
}
