use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{NumericsError, TokenMatrix};

pub const DEFAULT_HEMISPHERE_BUDGET: usize = 1_000;

/// Failed attempts between increases of the pull toward the pole.
const ATTEMPTS_PER_PULL: usize = 50;
const PULL_STEP: f64 = 0.25;

fn unit_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-300 {
            return v / norm;
        }
    }
}

/// Rows i.i.d. uniform on the unit sphere `S^{d-1}`.
pub fn sample_sphere_rows<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> TokenMatrix {
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        x.set_row(i, &unit_gaussian(d, rng).transpose());
    }
    TokenMatrix::new(x).expect("unit rows are finite")
}

/// Unit rows whose pairwise inner products are all nonnegative.
pub fn sample_hemisphere_rows<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    rng: &mut R,
) -> Result<TokenMatrix, NumericsError> {
    sample_hemisphere_rows_with_budget(n, d, rng, DEFAULT_HEMISPHERE_BUDGET)
}

/// Rejection sampler around a random pole `v`.
///
/// Each attempt draws rows uniformly from the open hemisphere `<x, v> > 0` and
/// accepts the whole matrix once the minimum pairwise inner product is
/// nonnegative. Every `ATTEMPTS_PER_PULL` failures the rows are pulled toward
/// the pole (`x + kappa v`, renormalized); once `kappa >= 1` all rows lie in a
/// 45 degree cap and acceptance is certain, so the default budget never runs
/// out.
pub fn sample_hemisphere_rows_with_budget<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    rng: &mut R,
    budget: usize,
) -> Result<TokenMatrix, NumericsError> {
    let pole = unit_gaussian(d, rng);
    for attempt in 0..budget {
        let kappa = PULL_STEP * (attempt / ATTEMPTS_PER_PULL) as f64;
        let mut x = DMatrix::zeros(n, d);
        for i in 0..n {
            let row = loop {
                let mut r = unit_gaussian(d, rng);
                let side = r.dot(&pole);
                if side == 0.0 {
                    continue;
                }
                if side < 0.0 {
                    r.neg_mut();
                }
                r += &pole * kappa;
                break r.normalize();
            };
            x.set_row(i, &row.transpose());
        }
        let gram = &x * x.transpose();
        if gram.iter().all(|&g| g >= 0.0) {
            return Ok(TokenMatrix::new(x).expect("unit rows are finite"));
        }
    }
    Err(NumericsError::RetryBudgetExhausted { attempts: budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{numerical_rank, seeded_rng, DEFAULT_RANK_TOL};

    #[test]
    fn sphere_rows_are_unit() {
        let mut rng = seeded_rng(0);
        let x = sample_sphere_rows(4, 8, &mut rng);
        assert!(x.has_unit_rows(1e-12));
        let single = sample_sphere_rows(1, 2, &mut rng);
        assert!(single.has_unit_rows(1e-12));
    }

    #[test]
    fn sphere_rows_full_rank_on_samples() {
        let mut rng = seeded_rng(1);
        for _ in 0..100 {
            let x = sample_sphere_rows(4, 8, &mut rng);
            assert_eq!(numerical_rank(&x, DEFAULT_RANK_TOL), 4);
        }
    }

    #[test]
    fn hemisphere_rows_have_nonnegative_gram() {
        let mut rng = seeded_rng(2);
        for (n, d) in [(3, 4), (4, 8), (16, 32), (2, 2), (5, 1)] {
            for _ in 0..20 {
                let x = sample_hemisphere_rows(n, d, &mut rng).unwrap();
                assert!(x.has_unit_rows(1e-12));
                let gram = x.as_matrix() * x.transpose();
                assert!(gram.iter().all(|&g| g >= 0.0));
            }
        }
    }

    #[test]
    fn zero_budget_reports_exhaustion() {
        let mut rng = seeded_rng(3);
        assert_eq!(
            sample_hemisphere_rows_with_budget(3, 4, &mut rng, 0),
            Err(NumericsError::RetryBudgetExhausted { attempts: 0 })
        );
    }
}
