use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative threshold used by [`numerical_rank`] unless the caller overrides it.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

const MAX_SWEEPS: usize = 80;

/// Thin SVD `X = U diag(s) V^T` with `s` sorted in nonincreasing order.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    /// `m x k` with orthonormal columns, `k = min(m, n)`.
    pub u: DMatrix<f64>,
    /// `n x k` with orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let s = DMatrix::from_diagonal(&DVector::from_column_slice(&self.singular_values));
        &self.u * s * self.v.transpose()
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of a working copy are rotated pairwise until they are mutually
/// orthogonal; their norms are then the singular values. Small singular values
/// come out with high relative accuracy, which matters for the rank and
/// `sigma_2 / sigma_1` diagnostics near collapse.
pub fn svd(x: &DMatrix<f64>) -> SvdResult {
    let (m, n) = x.shape();
    if m < n {
        let t = svd(&x.transpose());
        return SvdResult {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        };
    }
    if n == 0 {
        return SvdResult {
            singular_values: Vec::new(),
            u: DMatrix::zeros(m, 0),
            v: DMatrix::zeros(0, 0),
        };
    }

    let mut a = x.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut u = DMatrix::<f64>::zeros(m, n);
    let mut v_sorted = DMatrix::<f64>::zeros(n, n);
    let mut singular_values = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        singular_values.push(sigma);
        v_sorted.set_column(k, &v.column(j));
        if sigma > 0.0 {
            u.set_column(k, &(a.column(j) / sigma));
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);

    SvdResult {
        singular_values,
        u,
        v: v_sorted,
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let mp = m[(i, p)];
        let mq = m[(i, q)];
        m[(i, p)] = c * mp - s * mq;
        m[(i, q)] = s * mp + c * mq;
    }
}

/// Fills the listed zero columns of `u` with unit vectors orthogonal to all
/// other columns (Gram-Schmidt against the standard basis).
fn complete_orthonormal(u: &mut DMatrix<f64>, missing: &[usize]) {
    let m = u.nrows();
    for &k in missing {
        for e in 0..m {
            let mut cand = DVector::<f64>::zeros(m);
            cand[e] = 1.0;
            for _ in 0..2 {
                for j in 0..u.ncols() {
                    if j == k {
                        continue;
                    }
                    let col = u.column(j);
                    let proj = col.dot(&cand);
                    cand -= col * proj;
                }
            }
            let norm = cand.norm();
            if norm > 0.5 {
                u.set_column(k, &(cand / norm));
                break;
            }
        }
    }
}

pub fn spectral_norm(x: &DMatrix<f64>) -> f64 {
    svd(x).singular_values.first().copied().unwrap_or(0.0)
}

pub fn min_singular(x: &DMatrix<f64>) -> f64 {
    svd(x).singular_values.last().copied().unwrap_or(0.0)
}

/// Number of singular values above `rel_tol * sigma_1`.
pub fn numerical_rank(x: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = svd(x).singular_values;
    match s.first() {
        Some(&top) if top > 0.0 => s.iter().filter(|&&v| v > rel_tol * top).count(),
        _ => 0,
    }
}

/// Spectral norm estimate by power iteration on `M^T M`.
pub fn power_iteration_norm(m: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    // fixed, non-degenerate start vector
    let mut v = DVector::from_fn(n, |i, _| {
        1.0 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract()
    });
    v /= v.norm();
    let gram = m.transpose() * m;
    let mut estimate = 0.0;
    for _ in 0..max_iters {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        let next = norm.sqrt();
        if (next - estimate).abs() <= tol * next {
            return next;
        }
        estimate = next;
    }
    estimate
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    // column-major fill order keeps the stream layout independent of nalgebra internals
    let mut m = DMatrix::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `diag(R)` folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = gaussian_matrix(d, d, rng);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}
