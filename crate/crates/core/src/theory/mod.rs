//! Collapse rates, bound verifiers, and the Jordan-chain equilibria.

mod counterexample;
mod equilibrium;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AttentionMatrix, DynamicsError};
use crate::mask::MaskGraph;
use crate::metrics::column_oscillation;
use crate::numerics::{svd, NumericsError};

pub use counterexample::{
    check_counterexample_conditions, sample_counterexample_init, CounterexampleCheck,
    CounterexampleCondition, COUNTEREXAMPLE_BUDGET,
};
pub use equilibrium::{
    all_sign_vectors, beta_coefficients, construct_equilibrium, d2_fixed_points,
    fixed_point_residual, jordan_value_matrix, stable_rank_bound, w_for_delta, EquilibriumSet,
    RESIDUAL_TOL,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rate parameters out of range: {0}")]
    RateOutOfRange(String),
    #[error("mask is not quasi-strongly connected")]
    NotQuasiStronglyConnected,
    #[error("mask is missing self-loops (assumption A1)")]
    MissingSelfLoops,
    #[error("attention matrix {layer} does not match the mask sparsity")]
    SparsityMismatch { layer: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Blocks whose starting oscillation is below this are not checked.
pub const OSC_FLOOR: f64 = 1e-10;
/// Blocks whose starting `1 - phi` is below this are not checked.
pub const PHI_GAP_FLOOR: f64 = 1e-20;
const ABS_SLACK: f64 = 1e-15;
const REL_SLACK: f64 = 1e-12;
const PHI_REL_SLACK: f64 = 1e-9;
const MU_REL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub measured: f64,
    pub allowed: f64,
}

/// Outcome of checking one inequality along one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub theorem: String,
    pub epsilon: f64,
    pub radius: usize,
    /// Allowed contraction per block of `radius` steps.
    pub factor: f64,
    /// Measured contraction per checked block.
    pub block_factors: Vec<f64>,
    pub skipped_blocks: usize,
    pub violations: Vec<Violation>,
    pub pass: bool,
}

impl BoundReport {
    fn new(theorem: &str, epsilon: f64, radius: usize, factor: f64) -> Self {
        Self {
            theorem: theorem.to_string(),
            epsilon,
            radius,
            factor,
            block_factors: Vec::new(),
            skipped_blocks: 0,
            violations: Vec::new(),
            pass: true,
        }
    }

    fn check(&mut self, step: usize, measured: f64, allowed: f64, slack: f64) {
        if measured > allowed + slack {
            self.violations.push(Violation {
                step,
                measured,
                allowed,
            });
            self.pass = false;
        }
    }
}

/// Smallest on-edge weight over a sequence of attention matrices.
pub fn empirical_epsilon(attention: &[AttentionMatrix], g: &MaskGraph) -> Result<f64, TheoryError> {
    if attention.is_empty() {
        return Err(TheoryError::EmptySequence);
    }
    let mut eps = f64::INFINITY;
    for (layer, a) in attention.iter().enumerate() {
        if !a.sparsity_matches(g) {
            return Err(TheoryError::SparsityMismatch { layer });
        }
        eps = eps.min(a.min_on_edge(g));
    }
    Ok(eps)
}

/// Lower bound on on-edge weights for unit-norm tokens: scores lie in
/// `[-C^2, C^2] / sqrt(d_QK)`, so each weight is at least
/// `exp(-2 C^2 / sqrt(d_QK)) / |N_i|`.
pub fn analytic_epsilon_floor(qk_norm: f64, temperature: f64, max_in_degree: usize) -> f64 {
    (-2.0 * qk_norm * qk_norm / temperature.sqrt()).exp() / max_in_degree as f64
}

fn check_rate_inputs(epsilon: f64, r: usize) -> Result<(), TheoryError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(TheoryError::RateOutOfRange(format!(
            "epsilon = {epsilon} outside (0, 1]"
        )));
    }
    if r == 0 {
        return Err(TheoryError::RateOutOfRange(
            "radius must be at least 1".into(),
        ));
    }
    Ok(())
}

/// Per-step contraction `(1 - eps^r)^(1/r)` of pure attention.
pub fn san_rate(epsilon: f64, r: usize) -> Result<f64, TheoryError> {
    check_rate_inputs(epsilon, r)?;
    let block = 1.0 - epsilon.powi(r as i32);
    if block <= 0.0 {
        return Err(TheoryError::RateOutOfRange(format!(
            "eps^r = {} is not below 1",
            1.0 - block
        )));
    }
    Ok(block.powf(1.0 / r as f64))
}

/// Per-step contraction `(1 - n eps^(2r))^(1/(2r))` with LayerNorm and
/// orthogonal value matrices.
pub fn ln_rate(epsilon: f64, r: usize, n_centers: usize) -> Result<f64, TheoryError> {
    check_rate_inputs(epsilon, r)?;
    let block = 1.0 - n_centers as f64 * epsilon.powi(2 * r as i32);
    if block <= 0.0 {
        return Err(TheoryError::RateOutOfRange(format!(
            "n * eps^(2r) = {} is not below 1",
            1.0 - block
        )));
    }
    Ok(block.powf(1.0 / (2 * r) as f64))
}

fn checked_radius(g: &MaskGraph) -> Result<usize, TheoryError> {
    let c = g.classify();
    if !c.has_self_loops {
        return Err(TheoryError::MissingSelfLoops);
    }
    if !c.quasi_strongly_connected {
        return Err(TheoryError::NotQuasiStronglyConnected);
    }
    Ok(c.radius.unwrap_or(0).max(1))
}

/// Checks `osc(A^(t+r-1) ... A^(t) e_j) <= (1 - eps^r) osc(e_j)` for every
/// basis vector and every start `t`, with `eps` measured over the sequence and
/// `r` the radius of `g`.
///
/// A center `c` reaches every node by a walk of exactly `r` steps (self-loops
/// pad short paths), so column `c` of the block product is at least `eps^r`
/// everywhere; this bounds the ergodicity coefficient of the product by
/// `1 - eps^r`.
pub fn verify_oscillation_contraction(
    attention: &[AttentionMatrix],
    g: &MaskGraph,
) -> Result<BoundReport, TheoryError> {
    let r = checked_radius(g)?;
    let eps = empirical_epsilon(attention, g)?;
    let factor = 1.0 - eps.powi(r as i32);
    let mut report = BoundReport::new("oscillation", eps, r, factor);
    let n = g.n();
    if attention.len() < r {
        return Ok(report);
    }
    for t in 0..=attention.len() - r {
        let mut p = DMatrix::identity(n, n);
        for a in &attention[t..t + r] {
            p = a.as_matrix() * p;
        }
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let before = if n > 1 { 1.0 } else { 0.0 };
            if before < OSC_FLOOR {
                report.skipped_blocks += 1;
                continue;
            }
            let after = column_oscillation(p.column(j).as_slice());
            worst = worst.max(after / before);
            report.check(t, after, factor * before, ABS_SLACK + REL_SLACK * before);
        }
        report.block_factors.push(worst);
    }
    Ok(report)
}

/// Checks the envelope `mu(X^(t)) <= C (1 - eps^r)^(t/r)` with
/// `C = sqrt(N) B mu(X^(0)) / (1 - eps^r)`, where `B` bounds every running
/// product of value matrices.
///
/// Per column `x` of `X^(0)`, `||(I - J) P x||_2 <= sqrt(N) osc(P x)` and
/// `osc(x) <= sqrt(2) ||(I - J) x||_2`, so the constant is conservative by
/// `sqrt(2)`.
pub fn verify_mu_envelope(
    mu: &[f64],
    epsilon: f64,
    r: usize,
    value_bound: f64,
    n_tokens: usize,
) -> Result<BoundReport, TheoryError> {
    check_rate_inputs(epsilon, r)?;
    let block = 1.0 - epsilon.powi(r as i32);
    let mu0 = *mu.first().ok_or(TheoryError::EmptySequence)?;
    let mut report = BoundReport::new("1", epsilon, r, block);
    if block <= 0.0 {
        return Ok(report);
    }
    let c = (n_tokens as f64).sqrt() * value_bound * mu0 / block;
    for (t, &m) in mu.iter().enumerate() {
        let allowed = c * block.powf(t as f64 / r as f64);
        report.check(t, m, allowed, MU_REL_SLACK * allowed + ABS_SLACK);
    }
    for t in (0..mu.len().saturating_sub(r)).step_by(r) {
        if mu[t] > 0.0 {
            report.block_factors.push(mu[t + r] / mu[t]);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiVariant {
    /// Strongly connected mask: factor `1 - N eps^(2r)`, checked from the
    /// first step with `phi >= 0`.
    StronglyConnected,
    /// Tokens starting in a common hemisphere: factor `1 - eps^(2r)`,
    /// requires `phi^(0) >= 0`.
    Hemisphere,
}

/// Checks `1 - phi^(t+r) <= factor (1 - phi^(t))` over every start `t` on a
/// series of `1 - phi` values.
pub fn verify_phi_contraction(
    gaps: &[f64],
    epsilon: f64,
    r: usize,
    n_tokens: usize,
    variant: PhiVariant,
) -> Result<BoundReport, TheoryError> {
    check_rate_inputs(epsilon, r)?;
    let first = *gaps.first().ok_or(TheoryError::EmptySequence)?;
    let e2r = epsilon.powi(2 * r as i32);
    let (name, factor, start) = match variant {
        PhiVariant::StronglyConnected => {
            let factor = 1.0 - n_tokens as f64 * e2r;
            let start = gaps.iter().position(|&g| g <= 1.0).unwrap_or(gaps.len());
            ("2", factor, start)
        }
        PhiVariant::Hemisphere => {
            if first > 1.0 {
                return Err(TheoryError::Hypothesis(format!(
                    "phi(0) >= 0 required, got phi(0) = {}",
                    1.0 - first
                )));
            }
            ("corollary_1", 1.0 - e2r, 0)
        }
    };
    if factor <= 0.0 {
        return Err(TheoryError::RateOutOfRange(format!(
            "contraction factor {factor} is not positive"
        )));
    }
    let mut report = BoundReport::new(name, epsilon, r, factor);
    report.skipped_blocks = start.min(gaps.len().saturating_sub(r));
    for t in start..gaps.len().saturating_sub(r) {
        let before = gaps[t];
        if before < PHI_GAP_FLOOR {
            report.skipped_blocks += 1;
            continue;
        }
        let after = gaps[t + r];
        report.block_factors.push(after / before);
        let allowed = factor * before;
        report.check(t, after, allowed, PHI_REL_SLACK * allowed);
    }
    Ok(report)
}

/// `sigma_2 / sigma_1` of the partial products `D^(t) A^(t) ... D^(0) A^(0)`.
/// `scalings` may be empty (no LayerNorm, `D = I`).
pub fn ergodicity_gap(
    attention: &[AttentionMatrix],
    scalings: &[Vec<f64>],
) -> Result<Vec<f64>, TheoryError> {
    if !scalings.is_empty() && scalings.len() != attention.len() {
        return Err(TheoryError::InvalidParameter(format!(
            "{} attention matrices but {} scaling vectors",
            attention.len(),
            scalings.len()
        )));
    }
    let Some(first) = attention.first() else {
        return Ok(Vec::new());
    };
    let n = first.n();
    let mut p = DMatrix::identity(n, n);
    let mut gaps = Vec::with_capacity(attention.len());
    for (t, a) in attention.iter().enumerate() {
        p = a.as_matrix() * p;
        if let Some(d) = scalings.get(t) {
            for (mut row, &s) in p.row_iter_mut().zip(d) {
                row *= s;
            }
        }
        let norm = p.norm();
        if norm > 0.0 {
            p /= norm;
        }
        let s = svd(&p).singular_values;
        gaps.push(match (s.first(), s.get(1)) {
            (Some(&a), Some(&b)) if a > 0.0 => b / a,
            _ => 0.0,
        });
    }
    Ok(gaps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::masked_softmax;

    fn uniform(g: &MaskGraph) -> AttentionMatrix {
        masked_softmax(&DMatrix::zeros(g.n(), g.n()), g).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        let causal = MaskGraph::causal(2).unwrap();
        assert_eq!(
            empirical_epsilon(&[uniform(&causal)], &causal).unwrap(),
            0.5
        );
        let complete = MaskGraph::complete(5).unwrap();
        assert!((empirical_epsilon(&[uniform(&complete)], &complete).unwrap() - 0.2).abs() < 1e-16);
        assert_eq!(
            empirical_epsilon(&[uniform(&complete)], &MaskGraph::causal(5).unwrap()),
            Err(TheoryError::SparsityMismatch { layer: 0 })
        );
        assert_eq!(
            empirical_epsilon(&[], &causal),
            Err(TheoryError::EmptySequence)
        );
    }

    #[test]
    fn rate_examples() {
        assert!((san_rate(0.5, 1).unwrap() - 0.5).abs() < 1e-15);
        assert!((ln_rate(0.5, 1, 1).unwrap() - 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((san_rate(0.5, 2).unwrap() - 0.75f64.sqrt()).abs() < 1e-15);
        assert!(san_rate(1e-9, 1).unwrap() > 1.0 - 1e-8);
        assert!(ln_rate(1e-9, 1, 3).unwrap() > 1.0 - 1e-8);
        assert!(ln_rate(0.9, 1, 4).is_err());
        assert!(san_rate(0.0, 1).is_err());
        assert!(san_rate(0.5, 0).is_err());
    }

    #[test]
    fn rates_are_monotone_on_a_grid() {
        let eps: Vec<f64> = (1..50).map(|i| i as f64 / 50.0).collect();
        for r in 1..8 {
            for w in eps.windows(2) {
                assert!(san_rate(w[1], r).unwrap() < san_rate(w[0], r).unwrap());
            }
        }
        for &e in &eps {
            for r in 1..8 {
                assert!(san_rate(e, r + 1).unwrap() > san_rate(e, r).unwrap());
            }
        }
    }

    #[test]
    fn oscillation_examples() {
        let complete = MaskGraph::complete(4).unwrap();
        let rep = verify_oscillation_contraction(&[uniform(&complete)], &complete).unwrap();
        assert!(rep.pass);
        assert!(rep.block_factors[0] < 1e-15);

        let causal = MaskGraph::causal(2).unwrap();
        let rep = verify_oscillation_contraction(&[uniform(&causal)], &causal).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.factor, 0.5);
        assert_eq!(rep.block_factors, vec![0.5]);

        let split = MaskGraph::from_edges(3, &[(0, 0), (1, 1), (2, 2)]).unwrap();
        assert_eq!(
            verify_oscillation_contraction(&[uniform(&split)], &split),
            Err(TheoryError::NotQuasiStronglyConnected)
        );
    }

    #[test]
    fn phi_report_examples() {
        let rep =
            verify_phi_contraction(&[0.0; 10], 0.3, 1, 4, PhiVariant::StronglyConnected).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.skipped_blocks, 9);
        let bad = verify_phi_contraction(&[0.5, 0.5], 0.5, 1, 1, PhiVariant::Hemisphere).unwrap();
        assert!(!bad.pass);
        assert_eq!(bad.violations[0].allowed, 0.375);
        assert!(verify_phi_contraction(&[1.5, 0.5], 0.5, 1, 1, PhiVariant::Hemisphere).is_err());
        // phi only turns nonnegative at t = 2
        let late = verify_phi_contraction(
            &[1.8, 1.2, 0.9, 0.1],
            0.5,
            1,
            2,
            PhiVariant::StronglyConnected,
        )
        .unwrap();
        assert_eq!(late.block_factors.len(), 1);
    }

    #[test]
    fn mu_envelope_holds_for_geometric_decay() {
        let mu: Vec<f64> = (0..20).map(|t| 0.5f64.powi(t)).collect();
        let rep = verify_mu_envelope(&mu, 0.5, 1, 1.0, 2).unwrap();
        assert!(rep.pass);
        let grow: Vec<f64> = (0..20).map(|t| 1.1f64.powi(t)).collect();
        assert!(!verify_mu_envelope(&grow, 0.5, 1, 1.0, 2).unwrap().pass);
    }

    #[test]
    fn ergodicity_gap_examples() {
        let complete = MaskGraph::complete(3).unwrap();
        let gaps = ergodicity_gap(&[uniform(&complete)], &[]).unwrap();
        assert!(gaps[0] < 1e-15);

        let causal = MaskGraph::causal(3).unwrap();
        let seq: Vec<_> = (0..30).map(|_| uniform(&causal)).collect();
        let gaps = ergodicity_gap(&seq, &[]).unwrap();
        assert!(gaps[0] > 0.1);
        assert!(gaps[2..].windows(2).all(|w| w[1] <= w[0]));
        assert!(*gaps.last().unwrap() < 1e-3);
        assert!(ergodicity_gap(&seq, &[vec![1.0; 3]]).is_err());
    }
}
