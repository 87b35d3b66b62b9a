//! Layer update rules for masked self-attention with and without LayerNorm.
//!
//! One layer maps `X` (N x d) to
//!
//! * `san`:     `A X W_V`
//! * `post_ln`: `LN(A X W_V)`
//! * `pre_ln`:  `A LN(X) W_V`
//!
//! where `A = softmax_G(X W_Q (X W_K)^T / sqrt(d_QK))` and `LN` rescales each
//! row to unit 2-norm. Every function here is pure.

mod schedule;
mod trajectory;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::MaskGraph;
use crate::metrics::MetricsError;
use crate::numerics::{spectral_norm, TokenMatrix};

pub use schedule::{check_a3, A3Report, ScheduleKind, WeightSchedule, DEFAULT_A3_BOUND};
pub use trajectory::{
    run_trajectory, RecordPlan, SnapshotPlan, TrajectoryRecord, TrajectoryRow,
    TRAJECTORY_CSV_HEADER,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("token {node} has an empty neighbor set")]
    EmptyNeighborhood { node: usize },
    #[error("row {row} is zero and cannot be normalized")]
    ZeroRow { row: usize },
    #[error("non-finite value produced")]
    NonFinite,
    #[error("schedule has {len} layers but {requested} were requested")]
    ScheduleTooShort { len: usize, requested: usize },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("running value-matrix product norm {norm} exceeds bound {bound} at layer {layer} (assumption A3)")]
    A3Violated { layer: usize, norm: f64, bound: f64 },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<DynamicsError>,
    },
}

/// Query, key and value matrices of one layer plus the temperature `d_QK`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub query: DMatrix<f64>,
    pub key: DMatrix<f64>,
    pub value: DMatrix<f64>,
    pub temperature: f64,
}

impl LayerWeights {
    pub fn new(
        query: DMatrix<f64>,
        key: DMatrix<f64>,
        value: DMatrix<f64>,
        temperature: f64,
    ) -> Result<Self, DynamicsError> {
        let d = value.nrows();
        for (name, m) in [("W_Q", &query), ("W_K", &key), ("W_V", &value)] {
            if m.shape() != (d, d) {
                return Err(DynamicsError::Shape(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if !(temperature > 0.0) {
            return Err(DynamicsError::NonPositiveTemperature(temperature));
        }
        Ok(Self {
            query,
            key,
            value,
            temperature,
        })
    }

    /// `W_Q = W_K = 0`: attention is uniform over each neighborhood.
    pub fn zero_qk(value: DMatrix<f64>) -> Result<Self, DynamicsError> {
        let d = value.nrows();
        Self::new(DMatrix::zeros(d, d), DMatrix::zeros(d, d), value, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.value.nrows()
    }

    pub fn qk_norm(&self) -> f64 {
        spectral_norm(&self.query).max(spectral_norm(&self.key))
    }

    /// Assumption A2 for this layer: `max(||W_Q||_2, ||W_K||_2) <= c`.
    pub fn satisfies_a2(&self, c: f64) -> bool {
        self.qk_norm() <= c * (1.0 + 1e-12)
    }
}

/// Row-stochastic attention weights supported on the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(DMatrix<f64>);

impl AttentionMatrix {
    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// Smallest weight on an edge of `g`: the per-layer epsilon.
    pub fn min_on_edge(&self, g: &MaskGraph) -> f64 {
        g.edges()
            .map(|(j, i)| self.0[(i, j)])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_row_sum_error(&self) -> f64 {
        self.0
            .row_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `A_ij > 0` exactly on edges `(j, i)` of `g`.
    pub fn sparsity_matches(&self, g: &MaskGraph) -> bool {
        self.0.nrows() == g.n()
            && (0..g.n()).all(|i| (0..g.n()).all(|j| (self.0[(i, j)] > 0.0) == g.has_edge(j, i)))
    }
}

/// `R = (X W_Q)(X W_K)^T / sqrt(d_QK)`.
pub fn raw_scores(
    x: &DMatrix<f64>,
    query: &DMatrix<f64>,
    key: &DMatrix<f64>,
    temperature: f64,
) -> Result<DMatrix<f64>, DynamicsError> {
    if !(temperature > 0.0) {
        return Err(DynamicsError::NonPositiveTemperature(temperature));
    }
    if query.nrows() != x.ncols() || key.nrows() != x.ncols() || query.ncols() != key.ncols() {
        return Err(DynamicsError::Shape(format!(
            "X is {}x{}, W_Q is {}x{}, W_K is {}x{}",
            x.nrows(),
            x.ncols(),
            query.nrows(),
            query.ncols(),
            key.nrows(),
            key.ncols()
        )));
    }
    let q = x * query;
    let k = x * key;
    Ok((q * k.transpose()) / temperature.sqrt())
}

/// Softmax of each row restricted to the neighborhood `N_i`; entries off the
/// mask are exactly zero. The per-row maximum is taken over `N_i` only.
pub fn masked_softmax(r: &DMatrix<f64>, g: &MaskGraph) -> Result<AttentionMatrix, DynamicsError> {
    let n = g.n();
    if r.shape() != (n, n) {
        return Err(DynamicsError::Shape(format!(
            "scores are {}x{}, mask has {n} tokens",
            r.nrows(),
            r.ncols()
        )));
    }
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n {
        let nbrs = g.neighbors(i);
        if nbrs.is_empty() {
            return Err(DynamicsError::EmptyNeighborhood { node: i + 1 });
        }
        let max = nbrs
            .iter()
            .map(|&j| r[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(DynamicsError::NonFinite);
        }
        let mut total = 0.0;
        for &j in nbrs {
            let e = (r[(i, j)] - max).exp();
            a[(i, j)] = e;
            total += e;
        }
        for &j in nbrs {
            a[(i, j)] /= total;
        }
    }
    Ok(AttentionMatrix(a))
}

pub fn attention(
    x: &DMatrix<f64>,
    lw: &LayerWeights,
    g: &MaskGraph,
) -> Result<AttentionMatrix, DynamicsError> {
    masked_softmax(&raw_scores(x, &lw.query, &lw.key, lw.temperature)?, g)
}

fn checked_row_norms(x: &DMatrix<f64>) -> Result<Vec<f64>, DynamicsError> {
    x.row_iter()
        .enumerate()
        .map(|(row, r)| {
            let norm = r.norm();
            if norm == 0.0 {
                Err(DynamicsError::ZeroRow { row: row + 1 })
            } else {
                Ok(norm)
            }
        })
        .collect()
}

/// `D_ii = 1 / ||X_i||`.
pub fn row_scalings(x: &DMatrix<f64>) -> Result<Vec<f64>, DynamicsError> {
    Ok(checked_row_norms(x)?.into_iter().map(|n| 1.0 / n).collect())
}

/// Divides each row by its norm; dividing keeps `(3, 4) / 5` exact.
fn normalize_rows(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>), DynamicsError> {
    let norms = checked_row_norms(x)?;
    let mut out = x.clone();
    for (mut r, &n) in out.row_iter_mut().zip(&norms) {
        r /= n;
    }
    Ok((out, norms.into_iter().map(|n| 1.0 / n).collect()))
}

fn finite(m: DMatrix<f64>) -> Result<TokenMatrix, DynamicsError> {
    TokenMatrix::new(m).map_err(|_| DynamicsError::NonFinite)
}

fn check_layer(x: &TokenMatrix, lw: &LayerWeights, g: &MaskGraph) -> Result<(), DynamicsError> {
    if x.n_tokens() != g.n() {
        return Err(DynamicsError::Shape(format!(
            "{} tokens but the mask has {}",
            x.n_tokens(),
            g.n()
        )));
    }
    if x.dim() != lw.dim() {
        return Err(DynamicsError::Shape(format!(
            "token dim {} but weights are {}x{}",
            x.dim(),
            lw.dim(),
            lw.dim()
        )));
    }
    Ok(())
}

/// Row normalization (LayerNorm reduced to its scaling part). A zero row is a
/// hard error.
pub fn rms_norm(x: &TokenMatrix) -> Result<TokenMatrix, DynamicsError> {
    finite(normalize_rows(x)?.0)
}

pub fn step_san(
    x: &TokenMatrix,
    lw: &LayerWeights,
    g: &MaskGraph,
) -> Result<TokenMatrix, DynamicsError> {
    Ok(step(x, lw, g, Mode::San)?.state)
}

pub fn step_post_ln(
    x: &TokenMatrix,
    lw: &LayerWeights,
    g: &MaskGraph,
) -> Result<TokenMatrix, DynamicsError> {
    Ok(step(x, lw, g, Mode::PostLn)?.state)
}

pub fn step_pre_ln(
    x: &TokenMatrix,
    lw: &LayerWeights,
    g: &MaskGraph,
    scores: ScoreInput,
) -> Result<TokenMatrix, DynamicsError> {
    Ok(step(x, lw, g, Mode::PreLn(scores))?.state)
}

/// What the attention scores of a pre-LN layer are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreInput {
    /// `A` from the un-normalized `X`, as the update is literally written.
    #[default]
    Raw,
    /// `A` from `LN(X)`.
    Normalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    San,
    PostLn,
    PreLn(ScoreInput),
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::San => "san",
            Mode::PostLn => "post_ln",
            Mode::PreLn(ScoreInput::Raw) => "pre_ln",
            Mode::PreLn(ScoreInput::Normalized) => "pre_ln_normalized",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "san" => Ok(Mode::San),
            "post_ln" => Ok(Mode::PostLn),
            "pre_ln" => Ok(Mode::PreLn(ScoreInput::Raw)),
            "pre_ln_normalized" => Ok(Mode::PreLn(ScoreInput::Normalized)),
            other => Err(format!(
                "unknown mode {other:?} (expected san, post_ln, pre_ln or pre_ln_normalized)"
            )),
        }
    }
}

/// Everything one layer produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: TokenMatrix,
    pub attention: AttentionMatrix,
    /// `D` for post-LN (applied after attention) and pre-LN (applied before).
    pub scalings: Option<Vec<f64>>,
}

pub fn step(
    x: &TokenMatrix,
    lw: &LayerWeights,
    g: &MaskGraph,
    mode: Mode,
) -> Result<StepOutput, DynamicsError> {
    check_layer(x, lw, g)?;
    match mode {
        Mode::San => {
            let a = attention(x, lw, g)?;
            let state = finite(a.as_matrix() * x.as_matrix() * &lw.value)?;
            Ok(StepOutput {
                state,
                attention: a,
                scalings: None,
            })
        }
        Mode::PostLn => {
            let a = attention(x, lw, g)?;
            let tilde = a.as_matrix() * x.as_matrix() * &lw.value;
            let (normalized, d) = normalize_rows(&tilde)?;
            let state = finite(normalized)?;
            Ok(StepOutput {
                state,
                attention: a,
                scalings: Some(d),
            })
        }
        Mode::PreLn(scores) => {
            let (normalized, d) = normalize_rows(x)?;
            let a = match scores {
                ScoreInput::Raw => attention(x, lw, g)?,
                ScoreInput::Normalized => attention(&normalized, lw, g)?,
            };
            let state = finite(a.as_matrix() * normalized * &lw.value)?;
            Ok(StepOutput {
                state,
                attention: a,
                scalings: Some(d),
            })
        }
    }
}
