use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{DynamicsError, LayerWeights};
use crate::numerics::{
    gaussian_matrix, power_iteration_norm, random_orthogonal, spectral_norm, split_rng,
};
use crate::theory::jordan_value_matrix;

/// Bound on the running value-matrix product used when none is configured.
pub const DEFAULT_A3_BOUND: f64 = 10.0;

const POWER_ITERS: usize = 500;
const POWER_TOL: f64 = 1e-12;

/// How the layers of a schedule are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// The same `W_Q, W_K, W_V` at every layer.
    Constant {
        query: Vec<f64>,
        key: Vec<f64>,
        value: Vec<f64>,
    },
    /// Gaussian `W_Q, W_K` rescaled to spectral norm `qk_norm`; Gaussian `W_V`
    /// rescaled to spectral norm 1 so every running product stays bounded by 1.
    RandomBounded { qk_norm: f64, seed: u64 },
    /// As `RandomBounded` but with Haar-orthogonal `W_V`.
    RandomOrthogonalValue { qk_norm: f64, seed: u64 },
    /// `W_Q = W_K = 0` and `W_V = jordan_value_matrix(d, k, w)` at every layer.
    ZeroQkJordan { w: f64, k: usize },
}

/// Generator for the per-layer weights `t = 0..len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub len: usize,
    pub dim: usize,
    pub temperature: f64,
    pub kind: ScheduleKind,
}

impl WeightSchedule {
    pub fn new(
        kind: ScheduleKind,
        dim: usize,
        len: usize,
        temperature: f64,
    ) -> Result<Self, DynamicsError> {
        if dim == 0 {
            return Err(DynamicsError::InvalidSchedule(
                "dimension must be positive".into(),
            ));
        }
        if !(temperature > 0.0) {
            return Err(DynamicsError::NonPositiveTemperature(temperature));
        }
        match &kind {
            ScheduleKind::Constant { query, key, value } => {
                for (name, m) in [("query", query), ("key", key), ("value", value)] {
                    if m.len() != dim * dim {
                        return Err(DynamicsError::InvalidSchedule(format!(
                            "{name} has {} entries, expected {}",
                            m.len(),
                            dim * dim
                        )));
                    }
                    if m.iter().any(|v| !v.is_finite()) {
                        return Err(DynamicsError::InvalidSchedule(format!(
                            "{name} has non-finite entries"
                        )));
                    }
                }
            }
            ScheduleKind::RandomBounded { qk_norm, .. }
            | ScheduleKind::RandomOrthogonalValue { qk_norm, .. } => {
                if !(*qk_norm >= 0.0 && qk_norm.is_finite()) {
                    return Err(DynamicsError::InvalidSchedule(format!(
                        "qk_norm must be finite and nonnegative, got {qk_norm}"
                    )));
                }
            }
            ScheduleKind::ZeroQkJordan { w, k } => {
                if *k == 0 || *k > dim {
                    return Err(DynamicsError::InvalidSchedule(format!(
                        "k = {k} outside 1..={dim}"
                    )));
                }
                if !w.is_finite() {
                    return Err(DynamicsError::InvalidSchedule("w must be finite".into()));
                }
            }
        }
        Ok(Self {
            len,
            dim,
            temperature,
            kind,
        })
    }

    /// Constant schedule from row-major matrices.
    pub fn constant(lw: &LayerWeights, len: usize) -> Result<Self, DynamicsError> {
        let flat = |m: &DMatrix<f64>| m.transpose().as_slice().to_vec();
        Self::new(
            ScheduleKind::Constant {
                query: flat(&lw.query),
                key: flat(&lw.key),
                value: flat(&lw.value),
            },
            lw.dim(),
            len,
            lw.temperature,
        )
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self, DynamicsError> {
        Self::new(self.kind.clone(), self.dim, self.len, temperature)
    }

    pub fn with_len(&self, len: usize) -> Self {
        Self {
            len,
            ..self.clone()
        }
    }

    /// Weights of layer `t`. Random layers depend only on `(seed, t)`.
    pub fn layer(&self, t: usize) -> Result<LayerWeights, DynamicsError> {
        if t >= self.len {
            return Err(DynamicsError::ScheduleTooShort {
                len: self.len,
                requested: t + 1,
            });
        }
        let d = self.dim;
        match &self.kind {
            ScheduleKind::Constant { query, key, value } => LayerWeights::new(
                DMatrix::from_row_slice(d, d, query),
                DMatrix::from_row_slice(d, d, key),
                DMatrix::from_row_slice(d, d, value),
                self.temperature,
            ),
            ScheduleKind::RandomBounded { qk_norm, seed }
            | ScheduleKind::RandomOrthogonalValue { qk_norm, seed } => {
                let mut rng = split_rng(*seed, t as u64);
                let query = scaled(gaussian_matrix(d, d, &mut rng), *qk_norm);
                let key = scaled(gaussian_matrix(d, d, &mut rng), *qk_norm);
                let value = if matches!(self.kind, ScheduleKind::RandomBounded { .. }) {
                    scaled(gaussian_matrix(d, d, &mut rng), 1.0)
                } else {
                    random_orthogonal(d, &mut rng)
                };
                LayerWeights::new(query, key, value, self.temperature)
            }
            ScheduleKind::ZeroQkJordan { w, k } => LayerWeights::new(
                DMatrix::zeros(d, d),
                DMatrix::zeros(d, d),
                jordan_value_matrix(d, *k, *w)
                    .map_err(|e| DynamicsError::InvalidSchedule(e.to_string()))?,
                self.temperature,
            ),
        }
    }

    /// Bound `C` of assumption A2 that every layer satisfies, when known.
    pub fn declared_qk_bound(&self) -> Option<f64> {
        match &self.kind {
            ScheduleKind::RandomBounded { qk_norm, .. }
            | ScheduleKind::RandomOrthogonalValue { qk_norm, .. } => Some(*qk_norm),
            ScheduleKind::ZeroQkJordan { .. } => Some(0.0),
            ScheduleKind::Constant { .. } => None,
        }
    }

    /// Whether every `W_V` is orthogonal by construction.
    pub fn orthogonal_value(&self) -> bool {
        matches!(self.kind, ScheduleKind::RandomOrthogonalValue { .. })
            || matches!(self.kind, ScheduleKind::ZeroQkJordan { k: 1, .. })
    }

    /// Bound on every running product of value matrices, when known.
    pub fn declared_value_bound(&self) -> Option<f64> {
        match self.kind {
            ScheduleKind::RandomBounded { .. } | ScheduleKind::RandomOrthogonalValue { .. } => {
                Some(1.0)
            }
            ScheduleKind::ZeroQkJordan { k: 1, .. } => Some(1.0),
            _ => None,
        }
    }
}

fn scaled(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let norm = spectral_norm(&m);
    if target == 0.0 || norm == 0.0 {
        DMatrix::zeros(m.nrows(), m.ncols())
    } else {
        m * (target / norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct A3Report {
    pub bound: f64,
    /// Largest `||W_V^(t) ... W_V^(0)||_2` seen over the checked prefix.
    pub max_norm: f64,
}

/// Checks assumption A3 on the first `steps` layers by power iteration on the
/// accumulated value-matrix product.
pub fn check_a3(
    schedule: &WeightSchedule,
    steps: usize,
    bound: f64,
) -> Result<A3Report, DynamicsError> {
    let mut product = DMatrix::identity(schedule.dim, schedule.dim);
    let mut max_norm: f64 = 1.0;
    for t in 0..steps {
        product *= schedule.layer(t)?.value;
        let norm = power_iteration_norm(&product, POWER_ITERS, POWER_TOL);
        max_norm = max_norm.max(norm);
        if norm > bound {
            return Err(DynamicsError::A3Violated {
                layer: t,
                norm,
                bound,
            });
        }
    }
    Ok(A3Report { bound, max_norm })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn is_orthogonal(m: &DMatrix<f64>) -> bool {
        (m.transpose() * m - DMatrix::identity(m.ncols(), m.ncols())).norm() < 1e-10
    }

    #[test]
    fn emitted_layers_satisfy_declared_assumptions() {
        for kind in [
            ScheduleKind::RandomBounded {
                qk_norm: 2.0,
                seed: 3,
            },
            ScheduleKind::RandomOrthogonalValue {
                qk_norm: 0.5,
                seed: 4,
            },
            ScheduleKind::ZeroQkJordan { w: 3.0, k: 1 },
            ScheduleKind::ZeroQkJordan { w: 3.0, k: 4 },
        ] {
            let s = WeightSchedule::new(kind, 4, 30, 4.0).unwrap();
            for t in 0..s.len {
                let lw = s.layer(t).unwrap();
                assert!(lw.satisfies_a2(s.declared_qk_bound().unwrap()));
                if s.orthogonal_value() {
                    assert!(is_orthogonal(&lw.value));
                }
            }
            if let Some(b) = s.declared_value_bound() {
                assert!(check_a3(&s, s.len, b * (1.0 + 1e-9)).is_ok());
            }
        }
    }

    #[test]
    fn random_layers_are_reproducible_and_distinct() {
        let s = WeightSchedule::new(
            ScheduleKind::RandomBounded {
                qk_norm: 1.0,
                seed: 9,
            },
            3,
            5,
            1.0,
        )
        .unwrap();
        assert_eq!(s.layer(2).unwrap(), s.layer(2).unwrap());
        assert_ne!(s.layer(2).unwrap(), s.layer(3).unwrap());
        let t = s.with_temperature(7.0).unwrap().layer(2).unwrap();
        assert_eq!(t.query, s.layer(2).unwrap().query);
        assert_eq!(t.temperature, 7.0);
    }

    #[test]
    fn constant_round_trip_and_bounds() {
        let value = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        let lw = LayerWeights::zero_qk(value.clone()).unwrap();
        let s = WeightSchedule::constant(&lw, 3).unwrap();
        assert_eq!(s.layer(1).unwrap(), lw);
        assert_eq!(
            s.layer(3),
            Err(DynamicsError::ScheduleTooShort {
                len: 3,
                requested: 4
            })
        );
        // the Jordan product grows linearly, so a tight bound is eventually violated
        let err = check_a3(&s.with_len(100), 100, 10.0).unwrap_err();
        assert!(matches!(err, DynamicsError::A3Violated { .. }));
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(
            WeightSchedule::new(ScheduleKind::ZeroQkJordan { w: 2.0, k: 5 }, 4, 1, 1.0).is_err()
        );
        assert!(WeightSchedule::new(
            ScheduleKind::RandomBounded {
                qk_norm: -1.0,
                seed: 0
            },
            4,
            1,
            1.0
        )
        .is_err());
        assert!(WeightSchedule::new(
            ScheduleKind::RandomBounded {
                qk_norm: 1.0,
                seed: 0
            },
            4,
            1,
            0.0
        )
        .is_err());
    }
}
