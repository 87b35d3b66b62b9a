use nalgebra::DMatrix;
use serde::Serialize;

use super::TheoryError;
use crate::dynamics::{step_post_ln, LayerWeights};
use crate::mask::MaskGraph;
use crate::numerics::{numerical_rank, TokenMatrix, DEFAULT_RANK_TOL};

/// Fixed-point residual accepted for a constructed equilibrium.
pub const RESIDUAL_TOL: f64 = 1e-9;

/// Identity with superdiagonal `w` on the trailing `k x k` block, so that
/// `(x W)_j = x_j + w x_(j-1)` inside the block.
pub fn jordan_value_matrix(d: usize, k: usize, w: f64) -> Result<DMatrix<f64>, TheoryError> {
    if k == 0 || k > d {
        return Err(TheoryError::InvalidParameter(format!(
            "k = {k} outside 1..={d}"
        )));
    }
    let mut m = DMatrix::identity(d, d);
    for j in d - k + 1..d {
        m[(j - 1, j)] = w;
    }
    Ok(m)
}

/// An equilibrium of post-LN causal attention with zero `W_Q, W_K` and
/// `W_V = jordan_value_matrix(d, d, w)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumSet {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub w: f64,
    pub signs: Vec<i8>,
    #[serde(skip)]
    pub x: TokenMatrix,
}

impl EquilibriumSet {
    pub fn value_matrix(&self) -> DMatrix<f64> {
        jordan_value_matrix(self.d, self.d, self.w).expect("d >= 1")
    }

    pub fn residual(&self) -> Result<f64, TheoryError> {
        fixed_point_residual(&self.x, &self.value_matrix())
    }

    pub fn rank(&self) -> usize {
        numerical_rank(&self.x, DEFAULT_RANK_TOL)
    }
}

/// Builds a rank-`k` equilibrium.
///
/// The first `m = N - k + 1` tokens are `s_1 e_d`. Each later token solves
/// `X_i (I - W) = y` with `y = m X_m` for the first and `y = X_(i-1)` after,
/// which fixes all coordinates but the last; `s_i` picks the sign of the
/// square root that completes the unit norm. Alternating signs reproduce the
/// closed form of the full-rank case.
pub fn construct_equilibrium(
    n: usize,
    d: usize,
    k: usize,
    w: f64,
    signs: &[i8],
) -> Result<EquilibriumSet, TheoryError> {
    if !(w > 1.0) || !w.is_finite() {
        return Err(TheoryError::InvalidParameter("w must exceed 1".into()));
    }
    if n == 0 || d == 0 {
        return Err(TheoryError::InvalidParameter(
            "N and d must be positive".into(),
        ));
    }
    if k == 0 || k > n.min(d) {
        return Err(TheoryError::InvalidParameter(format!(
            "rank k = {k} outside 1..={}",
            n.min(d)
        )));
    }
    if signs.len() != k {
        return Err(TheoryError::InvalidParameter(format!(
            "{} signs given, rank {k} needs {k}",
            signs.len()
        )));
    }
    if signs.iter().any(|&s| s != 1 && s != -1) {
        return Err(TheoryError::InvalidParameter(
            "signs must be +1 or -1".into(),
        ));
    }
    let m = n - k + 1;
    if k > 1 && w < m as f64 {
        return Err(TheoryError::InvalidParameter(format!(
            "w must be at least N - k + 1 = {m} for rank {k}"
        )));
    }

    let mut x = DMatrix::zeros(n, d);
    for i in 0..m {
        x[(i, d - 1)] = f64::from(signs[0]);
    }
    let mut y: Vec<f64> = (0..d).map(|j| m as f64 * x[(m - 1, j)]).collect();
    for (offset, &s) in signs[1..].iter().enumerate() {
        let i = m + offset;
        // y_0 == 0 holds because row supports shift left by one per step and k <= d
        debug_assert_eq!(y[0], 0.0);
        let mut sum_sq = 0.0;
        for j in 1..d {
            let v = -y[j] / w;
            x[(i, j - 1)] = v;
            sum_sq += v * v;
        }
        let arg = 1.0 - sum_sq;
        if arg < 0.0 {
            return Err(TheoryError::InvalidParameter(format!(
                "square-root argument {arg} is negative at token {}",
                i + 1
            )));
        }
        x[(i, d - 1)] = f64::from(s) * arg.sqrt();
        y = x.row(i).iter().copied().collect();
    }
    Ok(EquilibriumSet {
        n,
        d,
        k,
        w,
        signs: signs.to_vec(),
        x: TokenMatrix::new(x)?,
    })
}

/// Every vector in `{-1, +1}^k`, starting from all `+1`.
pub fn all_sign_vectors(k: usize) -> Vec<Vec<i8>> {
    (0..1usize << k)
        .map(|bits| {
            (0..k)
                .map(|i| if bits >> i & 1 == 1 { -1 } else { 1 })
                .collect()
        })
        .collect()
}

/// `||LN(A X W_V) - X||_F` for the causal mask with uniform attention.
pub fn fixed_point_residual(x: &TokenMatrix, value: &DMatrix<f64>) -> Result<f64, TheoryError> {
    let g = MaskGraph::causal(x.n_tokens())
        .map_err(|e| TheoryError::InvalidParameter(e.to_string()))?;
    let lw = LayerWeights::zero_qk(value.clone())?;
    let next = step_post_ln(x, &lw, &g)?;
    Ok((next.as_matrix() - x.as_matrix()).norm())
}

/// `beta_i = 1 / ||sum_(j<=i) X_j W_V||`, recomputed from the state.
pub fn beta_coefficients(x: &TokenMatrix, value: &DMatrix<f64>) -> Vec<f64> {
    let xw = x.as_matrix() * value;
    let mut acc = nalgebra::RowDVector::zeros(xw.ncols());
    xw.row_iter()
        .map(|r| {
            acc += r;
            1.0 / acc.norm()
        })
        .collect()
}

/// Upper bound `N / (N - (N - 1) / w^2)` on the stable rank of the full-rank
/// equilibrium.
pub fn stable_rank_bound(n: usize, w: f64) -> Result<f64, TheoryError> {
    if !(w > 1.0) {
        return Err(TheoryError::InvalidParameter("w must exceed 1".into()));
    }
    let n = n as f64;
    Ok(n / (n - (n - 1.0) / (w * w)))
}

/// Smallest `w` with stable-rank bound at most `1 + delta` up to `O(1/N)`.
pub fn w_for_delta(delta: f64) -> Result<f64, TheoryError> {
    if !(delta > 0.0) {
        return Err(TheoryError::InvalidParameter(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok((1.0 / delta + 1.0).sqrt())
}

/// Fixed points `A = (-1/w, sqrt(1 - 1/w^2))` and `B = (-1/w, -sqrt(1 - 1/w^2))`
/// of the second token in the two-dimensional system.
pub fn d2_fixed_points(w: f64) -> Result<([f64; 2], [f64; 2]), TheoryError> {
    if !(w > 1.0) {
        return Err(TheoryError::InvalidParameter("w must exceed 1".into()));
    }
    let s = (1.0 - 1.0 / (w * w)).sqrt();
    Ok(([-1.0 / w, s], [-1.0 / w, -s]))
}
