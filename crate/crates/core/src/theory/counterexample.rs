use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::TheoryError;
use crate::numerics::{sample_sphere_rows, NumericsError, TokenMatrix};

/// Attempts allowed when drawing the second token.
pub const COUNTEREXAMPLE_BUDGET: usize = 100_000;

/// Offset of the first token from `e_d`, standing in for a first token that
/// has already converged while keeping `X_(1,1) > 0`.
const FIRST_TOKEN_TILT: f64 = 1e-12;

/// One of the sufficient conditions for the second token to stay away from
/// the first. Coordinates are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "condition", rename_all = "snake_case")]
pub enum CounterexampleCondition {
    /// `X_(1,1) > 0`.
    FirstTokenLeading { value: f64 },
    /// `X_(2,i) < 0` for `i <= d - 2`.
    SecondTokenNegative { coordinate: usize, value: f64 },
    /// `X_(2,d-1) <= -1/w`.
    SecondTokenPivot { value: f64, limit: f64 },
    /// `sum_j w^(-2j) (r_(d-1-j) / r_(d-1))^2 <= sqrt(w^2 - 1)`.
    RatioSum { value: f64, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleCheck {
    pub compliant: bool,
    pub failures: Vec<CounterexampleCondition>,
    pub ratio_sum: f64,
    pub ratio_limit: f64,
}

/// Ratios `r_i` defined by `X_(2,i) / X_(2,1) = r_i w^(i-1)`, 1-based.
fn ratios(x2: &[f64], w: f64) -> Vec<f64> {
    let mut r = vec![f64::NAN];
    r.extend(
        x2.iter()
            .enumerate()
            .map(|(i, &v)| v / x2[0] / w.powi(i as i32)),
    );
    r
}

pub fn check_counterexample_conditions(
    x0: &TokenMatrix,
    w: f64,
) -> Result<CounterexampleCheck, TheoryError> {
    if x0.n_tokens() < 2 || x0.dim() < 2 {
        return Err(TheoryError::InvalidParameter(
            "need at least two tokens of dimension two".into(),
        ));
    }
    if !(w > 1.0) {
        return Err(TheoryError::InvalidParameter("w must exceed 1".into()));
    }
    let d = x0.dim();
    let x2 = x0.row_vec(1);
    let mut failures = Vec::new();
    if !(x0[(0, 0)] > 0.0) {
        failures.push(CounterexampleCondition::FirstTokenLeading { value: x0[(0, 0)] });
    }
    for (i, &v) in x2[..d - 2].iter().enumerate() {
        if !(v < 0.0) {
            failures.push(CounterexampleCondition::SecondTokenNegative {
                coordinate: i + 1,
                value: v,
            });
        }
    }
    let pivot = x2[d - 2];
    if !(pivot <= -1.0 / w) {
        failures.push(CounterexampleCondition::SecondTokenPivot {
            value: pivot,
            limit: -1.0 / w,
        });
    }
    let r = ratios(&x2, w);
    let ratio_sum: f64 = (1..=d - 2)
        .map(|j| w.powi(-2 * j as i32) * (r[d - 1 - j] / r[d - 1]).powi(2))
        .sum();
    let ratio_limit = (w * w - 1.0).sqrt();
    if !(ratio_sum <= ratio_limit) {
        failures.push(CounterexampleCondition::RatioSum {
            value: ratio_sum,
            limit: ratio_limit,
        });
    }
    Ok(CounterexampleCheck {
        compliant: failures.is_empty(),
        failures,
        ratio_sum,
        ratio_limit,
    })
}

/// Initial state satisfying every condition: the first token sits at
/// `e_d` tilted by `1e-12` toward `e_1`, the second is drawn by rejection with
/// negative leading coordinates, and the rest are uniform on the sphere.
pub fn sample_counterexample_init<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    w: f64,
    rng: &mut R,
) -> Result<TokenMatrix, TheoryError> {
    if n < 2 || d < 2 {
        return Err(TheoryError::InvalidParameter(
            "need N >= 2 and d >= 2".into(),
        ));
    }
    if !(w > 1.0) {
        return Err(TheoryError::InvalidParameter("w must exceed 1".into()));
    }
    let mut x = sample_sphere_rows(n, d, rng).into_inner();
    let mut first = nalgebra::RowDVector::zeros(d);
    first[d - 1] = 1.0;
    first[0] = FIRST_TOKEN_TILT;
    x.set_row(0, &first.normalize());

    for _ in 0..COUNTEREXAMPLE_BUDGET {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for (j, a) in v.iter_mut().enumerate() {
            *a /= norm;
            if j < d - 1 {
                *a = -a.abs();
            }
        }
        x.set_row(1, &nalgebra::RowDVector::from_row_slice(&v));
        let candidate = TokenMatrix::new(x.clone())?;
        if check_counterexample_conditions(&candidate, w)?.compliant {
            return Ok(candidate);
        }
    }
    Err(NumericsError::RetryBudgetExhausted {
        attempts: COUNTEREXAMPLE_BUDGET,
    }
    .into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_rng;
    use crate::theory::construct_equilibrium;

    #[test]
    fn ratio_sum_equals_coordinate_form() {
        // sum_(i <= d-2) X_(2,i)^2 / X_(2,d-1)^2
        let mut rng = seeded_rng(5);
        for d in 2..7 {
            for _ in 0..20 {
                let x = sample_counterexample_init(3, d, 1.0 + d as f64, &mut rng).unwrap();
                let c = check_counterexample_conditions(&x, 1.0 + d as f64).unwrap();
                let x2 = x.row_vec(1);
                let direct: f64 =
                    x2[..d - 2].iter().map(|v| v * v).sum::<f64>() / (x2[d - 2] * x2[d - 2]);
                assert!((c.ratio_sum - direct).abs() <= 1e-12 * direct.max(1.0));
                assert!(c.compliant);
            }
        }
    }

    #[test]
    fn equilibrium_second_token_is_compliant() {
        let w = 4.0;
        let mut eq = construct_equilibrium(2, 2, 2, w, &[1, -1])
            .unwrap()
            .x
            .into_inner();
        // the first token needs a positive leading coordinate
        eq[(0, 0)] = 1e-12;
        let c = check_counterexample_conditions(&TokenMatrix::new(eq).unwrap(), w).unwrap();
        assert!(c.compliant, "{:?}", c.failures);
    }

    #[test]
    fn named_failure_for_shallow_pivot() {
        let w = 3.0;
        let p = -1.0 / (2.0 * w);
        let x = TokenMatrix::from_rows(&[
            vec![0.6, 0.0, 0.8],
            vec![-0.1, p, (1.0f64 - 0.01 - p * p).sqrt()],
        ])
        .unwrap();
        let c = check_counterexample_conditions(&x, w).unwrap();
        assert!(!c.compliant);
        assert_eq!(
            c.failures,
            vec![CounterexampleCondition::SecondTokenPivot {
                value: p,
                limit: -1.0 / w
            }]
        );
    }
}
