use std::collections::BTreeSet;
use std::io::{self, Write};

use super::{step, AttentionMatrix, DynamicsError, Mode, WeightSchedule};
use crate::mask::MaskGraph;
use crate::metrics::MetricsRow;
use crate::numerics::TokenMatrix;

pub const TRAJECTORY_CSV_HEADER: &str =
    "step,mu,phi,stable_rank,sigma_min,rank,eps_layer,sigma2_over_sigma1";

/// Which states to keep in full.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SnapshotPlan {
    #[default]
    None,
    All,
    Every(usize),
    At(BTreeSet<usize>),
}

impl SnapshotPlan {
    pub fn includes(&self, t: usize, last: usize) -> bool {
        match self {
            SnapshotPlan::None => false,
            SnapshotPlan::All => true,
            SnapshotPlan::Every(k) => t == last || (*k > 0 && t.is_multiple_of(*k)),
            SnapshotPlan::At(steps) => steps.contains(&t),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecordPlan {
    pub snapshots: SnapshotPlan,
    pub keep_attention: bool,
    pub keep_scalings: bool,
    pub oscillation: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: usize,
    pub metrics: MetricsRow,
    /// Minimum on-edge attention weight of the layer producing this state.
    pub eps_layer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub mode: Mode,
    pub rows: Vec<TrajectoryRow>,
    pub snapshots: Vec<(usize, TokenMatrix)>,
    /// `A^(t)` for `t = 0..T` when kept.
    pub attention: Vec<AttentionMatrix>,
    /// `D^(t)` when kept (LN modes only).
    pub scalings: Vec<Vec<f64>>,
    pub final_state: TokenMatrix,
}

impl TrajectoryRecord {
    pub fn mu_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.metrics.mu).collect()
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> io::Result<()> {
        writeln!(out, "{TRAJECTORY_CSV_HEADER}")?;
        for r in &self.rows {
            let m = &r.metrics;
            let eps = r.eps_layer.map(|e| format!("{e:e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{},{},{:e}",
                r.step, m.mu, m.phi, m.stable_rank, m.sigma_min, m.rank, eps, m.sigma2_over_sigma1
            )?;
        }
        Ok(())
    }
}

/// Runs `steps` layers from `x0`, recording metrics of every state.
pub fn run_trajectory(
    x0: &TokenMatrix,
    schedule: &WeightSchedule,
    g: &MaskGraph,
    mode: Mode,
    steps: usize,
    plan: &RecordPlan,
) -> Result<TrajectoryRecord, DynamicsError> {
    if schedule.len < steps {
        return Err(DynamicsError::ScheduleTooShort {
            len: schedule.len,
            requested: steps,
        });
    }
    if x0.n_tokens() != g.n() || x0.dim() != schedule.dim {
        return Err(DynamicsError::Shape(format!(
            "initial state is {}x{}, mask has {} tokens, schedule dimension is {}",
            x0.n_tokens(),
            x0.dim(),
            g.n(),
            schedule.dim
        )));
    }
    let at = |step: usize| {
        move |e: DynamicsError| DynamicsError::AtStep {
            step,
            source: Box::new(e),
        }
    };

    let mut record = TrajectoryRecord {
        mode,
        rows: Vec::with_capacity(steps + 1),
        snapshots: Vec::new(),
        attention: Vec::new(),
        scalings: Vec::new(),
        final_state: x0.clone(),
    };
    record.rows.push(TrajectoryRow {
        step: 0,
        metrics: MetricsRow::compute(x0, plan.oscillation).map_err(|e| at(0)(e.into()))?,
        eps_layer: None,
    });
    if plan.snapshots.includes(0, steps) {
        record.snapshots.push((0, x0.clone()));
    }

    let mut x = x0.clone();
    for t in 0..steps {
        let lw = schedule.layer(t).map_err(at(t + 1))?;
        let out = step(&x, &lw, g, mode).map_err(at(t + 1))?;
        x = out.state;
        record.rows.push(TrajectoryRow {
            step: t + 1,
            metrics: MetricsRow::compute(&x, plan.oscillation).map_err(|e| at(t + 1)(e.into()))?,
            eps_layer: Some(out.attention.min_on_edge(g)),
        });
        if plan.snapshots.includes(t + 1, steps) {
            record.snapshots.push((t + 1, x.clone()));
        }
        if plan.keep_attention {
            record.attention.push(out.attention);
        }
        if plan.keep_scalings {
            if let Some(d) = out.scalings {
                record.scalings.push(d);
            }
        }
    }
    record.final_state = x;
    Ok(record)
}
