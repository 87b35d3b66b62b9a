use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use maskdyn::dynamics::{
    check_a3, run_trajectory, RecordPlan, ScheduleKind, SnapshotPlan, TrajectoryRecord,
    WeightSchedule, DEFAULT_A3_BOUND,
};
use maskdyn::mask::MaskGraph;
use maskdyn::metrics::one_minus_phi;
use maskdyn::numerics::{
    gaussian_matrix, random_orthogonal, sample_hemisphere_rows, sample_sphere_rows,
    snapshot_csv_header, spectral_norm, split_rng, write_snapshot_rows, TokenMatrix,
};
use maskdyn::theory::{
    all_sign_vectors, construct_equilibrium, empirical_epsilon, sample_counterexample_init,
    stable_rank_bound, verify_mu_envelope, verify_oscillation_contraction, verify_phi_contraction,
    BoundReport, PhiVariant, TheoryError, RESIDUAL_TOL,
};
use maskdyn::{LayerWeights, Mode};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, InitChoice, MaskChoice, ScheduleChoice, Theorem};
use crate::CliError;

/// RNG stream of the initial state; layer `t` of a random schedule uses
/// stream `t` of the same seed.
const INIT_STREAM: u64 = u64::MAX;
const SHARED_QK_STREAM: u64 = u64::MAX - 1;
/// `mu` values at or below this are left out of the log-slope fit.
const MU_FIT_FLOOR: f64 = 1e-13;

/// One trajectory of a grid: mask, mode, temperature and seed.
#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub mask: MaskChoice,
    pub mode: Mode,
    pub temperature: f64,
}

impl Cell {
    pub fn label(&self) -> String {
        format!(
            "{}_{}_temp{}",
            self.mask.label(),
            self.mode,
            self.temperature
        )
    }
}

pub fn schedule(
    cfg: &ExperimentConfig,
    temperature: f64,
    seed: u64,
) -> Result<WeightSchedule, CliError> {
    let (d, len) = (cfg.d, cfg.steps);
    let kind = match cfg.schedule {
        ScheduleChoice::RandomBounded => ScheduleKind::RandomBounded {
            qk_norm: cfg.qk_norm,
            seed,
        },
        ScheduleChoice::RandomOrthogonal => ScheduleKind::RandomOrthogonalValue {
            qk_norm: cfg.qk_norm,
            seed,
        },
        ScheduleChoice::Jordan => ScheduleKind::ZeroQkJordan {
            w: cfg.w.expect("validated"),
            k: cfg.k.unwrap_or(d),
        },
        ScheduleChoice::SharedQk => {
            let mut rng = split_rng(seed, SHARED_QK_STREAM);
            let g = gaussian_matrix(d, d, &mut rng);
            let norm = spectral_norm(&g);
            let qk = if norm > 0.0 {
                g * (cfg.qk_norm / norm)
            } else {
                g
            };
            let lw = LayerWeights::new(qk.clone(), qk, random_orthogonal(d, &mut rng), temperature)
                .map_err(|e| CliError::usage(e.to_string()))?;
            return WeightSchedule::constant(&lw, len).map_err(|e| CliError::usage(e.to_string()));
        }
    };
    WeightSchedule::new(kind, d, len, temperature).map_err(|e| CliError::usage(e.to_string()))
}

pub fn initial_state(cfg: &ExperimentConfig, seed: u64) -> Result<TokenMatrix, CliError> {
    let mut rng = split_rng(seed, INIT_STREAM);
    match cfg.init {
        InitChoice::Sphere => Ok(sample_sphere_rows(cfg.n, cfg.d, &mut rng)),
        InitChoice::Hemisphere => sample_hemisphere_rows(cfg.n, cfg.d, &mut rng)
            .map_err(|e| CliError::runtime(e.to_string())),
        InitChoice::Counterexample => {
            sample_counterexample_init(cfg.n, cfg.d, cfg.w.expect("validated"), &mut rng)
                .map_err(|e| CliError::runtime(e.to_string()))
        }
    }
}

pub fn simulate(
    cfg: &ExperimentConfig,
    g: &MaskGraph,
    cell: Cell,
    seed: u64,
    plan: &RecordPlan,
) -> Result<TrajectoryRecord, CliError> {
    let s = schedule(cfg, cell.temperature, seed)?;
    let x0 = initial_state(cfg, seed)?;
    run_trajectory(&x0, &s, g, cell.mode, cfg.steps, plan)
        .map_err(|e| CliError::runtime(e.to_string()))
}

/// Least-squares slope of `log10 mu` against the step, over `mu > 1e-13`.
pub fn log10_slope(mu: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = mu
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > MU_FIT_FLOOR)
        .map(|(t, m)| (t as f64, m.log10()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = pts
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub fn write_trajectory(rec: &TrajectoryRecord, path: &Path) -> Result<(), CliError> {
    let mut out = create(path)?;
    rec.write_csv(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path, e))
}

fn write_snapshots(rec: &TrajectoryRecord, path: &Path) -> Result<(), CliError> {
    let mut out = create(path)?;
    let d = rec.final_state.dim();
    (|| {
        writeln!(out, "{}", snapshot_csv_header(d))?;
        for (t, x) in &rec.snapshots {
            write_snapshot_rows(&mut out, *t, x)?;
        }
        out.flush()
    })()
    .map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub csv: String,
    pub final_mu: f64,
    pub mu_log10_slope: Option<f64>,
    pub final_rank: usize,
    pub final_stable_rank: f64,
    pub final_sigma2_over_sigma1: f64,
    pub min_eps_layer: Option<f64>,
    pub reports: Vec<BoundReport>,
    pub pass: Option<bool>,
}

/// Runs every seed of a single cell, writing `trajectory_seed<s>.csv` (and
/// snapshots when requested) under `out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>, CliError> {
    let cell = Cell {
        mask: cfg.single_mask()?,
        mode: cfg.single_mode()?,
        temperature: cfg.single_temperature()?,
    };
    let g = cfg.build_mask(cell.mask)?;
    let gate = cfg
        .theorem
        .map(|t| gate(cfg, t, &g, cell.mode))
        .transpose()?;
    let mut plan = RecordPlan {
        snapshots: cfg.snapshots.clone(),
        oscillation: cfg.oscillation,
        ..RecordPlan::default()
    };
    if let Some(t) = gate {
        extend_plan(&mut plan, t);
    }
    let mut summaries = Vec::new();
    for &seed in &cfg.seeds {
        let rec = simulate(cfg, &g, cell, seed, &plan)?;
        let csv = format!("trajectory_seed{seed}.csv");
        write_trajectory(&rec, &cfg.out_dir.join(&csv))?;
        if cfg.snapshots != SnapshotPlan::None {
            write_snapshots(&rec, &cfg.out_dir.join(format!("snapshots_seed{seed}.csv")))?;
        }
        let reports = match gate {
            Some(t) => bound_reports(cfg, t, &g, cell, seed, &rec)?,
            None => Vec::new(),
        };
        let last = &rec.rows.last().expect("initial row").metrics;
        let mu = rec.mu_series();
        summaries.push(RunSummary {
            seed,
            csv,
            final_mu: last.mu,
            mu_log10_slope: log10_slope(&mu),
            final_rank: last.rank,
            final_stable_rank: last.stable_rank,
            final_sigma2_over_sigma1: last.sigma2_over_sigma1,
            min_eps_layer: rec.rows.iter().filter_map(|r| r.eps_layer).reduce(f64::min),
            pass: gate.map(|_| reports.iter().all(|r| r.pass)),
            reports,
        });
    }
    Ok(summaries)
}

fn extend_plan(plan: &mut RecordPlan, theorem: Theorem) {
    match theorem {
        Theorem::One => plan.keep_attention = true,
        Theorem::Two | Theorem::Corollary1 => {
            plan.keep_attention = true;
            plan.snapshots = SnapshotPlan::All;
        }
        Theorem::Three => {}
    }
}

/// Checks the hypotheses of `theorem` for this setup and returns the bound
/// that applies: `2` on a mask that is only quasi-strongly connected routes
/// to `corollary_1` when the initial state lies in a hemisphere.
pub fn gate(
    cfg: &ExperimentConfig,
    theorem: Theorem,
    g: &MaskGraph,
    mode: Mode,
) -> Result<Theorem, CliError> {
    let reject = |msg: String| {
        Err(CliError::usage(format!(
            "theorem {}: {msg}",
            theorem_id(theorem)
        )))
    };
    if theorem == Theorem::Three {
        return Ok(theorem);
    }
    let c = g.classify();
    if !c.has_self_loops {
        return reject("assumption A1 violated: every token must attend to itself".into());
    }
    if !c.quasi_strongly_connected {
        return reject("the mask has no center node (not quasi-strongly connected)".into());
    }
    let orthogonal = matches!(
        cfg.schedule,
        ScheduleChoice::RandomOrthogonal | ScheduleChoice::SharedQk
    ) || (cfg.schedule == ScheduleChoice::Jordan && cfg.k == Some(1));
    match theorem {
        Theorem::One => {
            if mode != Mode::San {
                return reject(format!("concerns mode = san, got {mode}"));
            }
            if cfg.schedule == ScheduleChoice::Jordan && cfg.k.unwrap_or(cfg.d) > 1 {
                return reject(
                    "assumption A3 violated: Jordan value products grow without bound".into(),
                );
            }
            Ok(Theorem::One)
        }
        Theorem::Two | Theorem::Corollary1 => {
            if mode != Mode::PostLn {
                return reject(format!("concerns mode = post_ln, got {mode}"));
            }
            if !orthogonal {
                return reject(
                    "orthogonality violated: W_V must be orthogonal (schedule = random_orthogonal)"
                        .into(),
                );
            }
            if theorem == Theorem::Two && c.strongly_connected {
                return Ok(Theorem::Two);
            }
            if cfg.init != InitChoice::Hemisphere {
                return reject(if theorem == Theorem::Two {
                    "requires a strongly connected mask; masks with a center node are covered by corollary_1 with init = hemisphere".into()
                } else {
                    "phi >= 0 violated: needs init = hemisphere".into()
                });
            }
            Ok(Theorem::Corollary1)
        }
        Theorem::Three => unreachable!(),
    }
}

pub fn theorem_id(t: Theorem) -> &'static str {
    match t {
        Theorem::One => "1",
        Theorem::Two => "2",
        Theorem::Corollary1 => "corollary_1",
        Theorem::Three => "3",
    }
}

fn theory(e: TheoryError) -> CliError {
    match e {
        TheoryError::Hypothesis(_) | TheoryError::InvalidParameter(_) => {
            CliError::usage(e.to_string())
        }
        other => CliError::runtime(other.to_string()),
    }
}

fn bound_reports(
    cfg: &ExperimentConfig,
    theorem: Theorem,
    g: &MaskGraph,
    cell: Cell,
    seed: u64,
    rec: &TrajectoryRecord,
) -> Result<Vec<BoundReport>, CliError> {
    if rec.attention.is_empty() {
        return Ok(Vec::new());
    }
    let eps = empirical_epsilon(&rec.attention, g).map_err(theory)?;
    let r = g.classify().radius.unwrap_or(0).max(1);
    match theorem {
        Theorem::One => {
            let s = schedule(cfg, cell.temperature, seed)?;
            let bound = s.declared_value_bound().unwrap_or(DEFAULT_A3_BOUND);
            check_a3(&s, cfg.steps, bound * (1.0 + 1e-9))
                .map_err(|e| CliError::usage(e.to_string()))?;
            Ok(vec![
                verify_oscillation_contraction(&rec.attention, g).map_err(theory)?,
                verify_mu_envelope(&rec.mu_series(), eps, r, bound, g.n()).map_err(theory)?,
            ])
        }
        Theorem::Two | Theorem::Corollary1 => {
            let gaps = rec
                .snapshots
                .iter()
                .map(|(_, x)| one_minus_phi(x))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::runtime(e.to_string()))?;
            let variant = if theorem == Theorem::Two {
                PhiVariant::StronglyConnected
            } else {
                PhiVariant::Hemisphere
            };
            Ok(vec![
                verify_phi_contraction(&gaps, eps, r, g.n(), variant).map_err(theory)?
            ])
        }
        Theorem::Three => Ok(Vec::new()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub reports: Vec<BoundReport>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumCheck {
    pub k: usize,
    pub signs: Vec<i8>,
    pub residual: f64,
    pub rank: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Verification {
    Bounds {
        theorem: String,
        seeds: Vec<SeedVerdict>,
        pass: bool,
    },
    Equilibria {
        theorem: String,
        checks: Vec<EquilibriumCheck>,
        pass: bool,
    },
}

impl Verification {
    pub fn pass(&self) -> bool {
        match self {
            Verification::Bounds { pass, .. } | Verification::Equilibria { pass, .. } => *pass,
        }
    }
}

pub fn verify(cfg: &ExperimentConfig) -> Result<Verification, CliError> {
    let theorem = cfg
        .theorem
        .ok_or_else(|| CliError::usage("verify needs a theorem (1, 2, corollary_1 or 3)"))?;
    if theorem == Theorem::Three {
        return verify_equilibria(cfg);
    }
    let cell = Cell {
        mask: cfg.single_mask()?,
        mode: cfg.single_mode()?,
        temperature: cfg.single_temperature()?,
    };
    let g = cfg.build_mask(cell.mask)?;
    let effective = gate(cfg, theorem, &g, cell.mode)?;
    let mut plan = RecordPlan::default();
    extend_plan(&mut plan, effective);
    let seeds = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let rec = simulate(cfg, &g, cell, seed, &plan)?;
            let reports = bound_reports(cfg, effective, &g, cell, seed, &rec)?;
            let pass = reports.iter().all(|r| r.pass);
            Ok(SeedVerdict {
                seed,
                reports,
                pass,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(Verification::Bounds {
        theorem: theorem_id(effective).into(),
        pass: seeds.iter().all(|s| s.pass),
        seeds,
    })
}

fn verify_equilibria(cfg: &ExperimentConfig) -> Result<Verification, CliError> {
    let w = cfg.w.expect("validated");
    let mut checks = Vec::new();
    for k in 1..=cfg.d.min(cfg.n) {
        for signs in all_sign_vectors(k) {
            let eq = construct_equilibrium(cfg.n, cfg.d, k, w, &signs).map_err(theory)?;
            let residual = eq.residual().map_err(theory)?;
            let rank = eq.rank();
            checks.push(EquilibriumCheck {
                k,
                signs,
                residual,
                rank,
                pass: residual < RESIDUAL_TOL && rank == k,
            });
        }
    }
    Ok(Verification::Equilibria {
        theorem: "3".into(),
        pass: checks.iter().all(|c| c.pass),
        checks,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EquilibriumSummary {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub w: f64,
    pub signs: Vec<i8>,
    pub residual: f64,
    pub rank: usize,
    pub stable_rank: f64,
    /// Only for full-rank equilibria (`k = d`).
    pub stable_rank_bound: Option<f64>,
    pub csv: String,
}

/// Builds one equilibrium and writes its rows to `equilibrium.csv`.
pub fn equilibrium(cfg: &ExperimentConfig) -> Result<EquilibriumSummary, CliError> {
    let w = cfg.w.ok_or_else(|| CliError::usage("w is required"))?;
    let k = cfg.k.unwrap_or(cfg.d);
    let signs = cfg.signs.clone().unwrap_or_else(|| vec![1; k]);
    let eq = construct_equilibrium(cfg.n, cfg.d, k, w, &signs).map_err(theory)?;
    let csv = "equilibrium.csv".to_string();
    let path = cfg.out_dir.join(&csv);
    let mut out = create(&path)?;
    (|| {
        writeln!(out, "{}", snapshot_csv_header(cfg.d))?;
        write_snapshot_rows(&mut out, 0, &eq.x)?;
        out.flush()
    })()
    .map_err(|e| CliError::io(&path, e))?;
    Ok(EquilibriumSummary {
        n: cfg.n,
        d: cfg.d,
        k,
        w,
        residual: eq.residual().map_err(theory)?,
        rank: eq.rank(),
        stable_rank: maskdyn::metrics::stable_rank(&eq.x)
            .map_err(|e| CliError::runtime(e.to_string()))?,
        stable_rank_bound: if k == cfg.d {
            Some(stable_rank_bound(cfg.n, w).map_err(theory)?)
        } else {
            None
        },
        signs,
        csv,
    })
}

/// Per-step mean and sample standard deviation over seeds.
const AGGREGATE_HEADER: &str =
    "mask,mode,temperature,step,seeds,mu_mean,mu_std,phi_mean,phi_std,stable_rank_mean,stable_rank_std";

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub mask: MaskChoice,
    pub mode: String,
    pub temperature: f64,
    pub seed: u64,
    pub csv: Option<String>,
    pub final_mu: Option<f64>,
    pub error: Option<String>,
}

/// Runs the full grid `mask x mode x temperature x seed` in parallel. Each
/// trajectory goes to `<cell>/seed<s>.csv`; a failed trajectory is recorded
/// and the rest continue. `aggregate.csv` is written after all runs finish.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<CellOutcome>, CliError> {
    let mut cells = Vec::new();
    for &mask in &cfg.masks {
        for &mode in &cfg.modes {
            for &temperature in &cfg.temperatures {
                cells.push(Cell {
                    mask,
                    mode,
                    temperature,
                });
            }
        }
    }
    let graphs = cfg
        .masks
        .iter()
        .map(|&m| cfg.build_mask(m).map(|g| (m, g)))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let plan = RecordPlan {
        oscillation: cfg.oscillation,
        ..RecordPlan::default()
    };
    let results: Vec<Result<TrajectoryRecord, CliError>> = jobs
        .par_iter()
        .map(|&(c, seed)| {
            let cell = cells[c];
            let g = &graphs
                .iter()
                .find(|(m, _)| *m == cell.mask)
                .expect("built")
                .1;
            let rec = simulate(cfg, g, cell, seed, &plan)?;
            write_trajectory(&rec, &cell_path(cfg, &cell, seed))?;
            Ok(rec)
        })
        .collect();

    let agg_path = cfg.out_dir.join("aggregate.csv");
    let mut agg = create(&agg_path)?;
    writeln!(agg, "{AGGREGATE_HEADER}").map_err(|e| CliError::io(&agg_path, e))?;
    let mut outcomes = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let mut ok = Vec::new();
        for ((_, seed), res) in jobs.iter().zip(&results).filter(|((jc, _), _)| *jc == c) {
            let rel = cell_path(cfg, cell, *seed)
                .strip_prefix(&cfg.out_dir)
                .map(Path::to_path_buf)
                .unwrap_or_default();
            let outcome = CellOutcome {
                mask: cell.mask,
                mode: cell.mode.to_string(),
                temperature: cell.temperature,
                seed: *seed,
                csv: res.is_ok().then(|| rel.display().to_string()),
                final_mu: res
                    .as_ref()
                    .ok()
                    .map(|r| r.rows.last().expect("initial row").metrics.mu),
                error: res.as_ref().err().map(|e| e.to_string()),
            };
            outcomes.push(outcome);
            if let Ok(rec) = res {
                ok.push(rec);
            }
        }
        write_aggregate(&mut agg, cell, &ok, cfg.steps).map_err(|e| CliError::io(&agg_path, e))?;
    }
    agg.flush().map_err(|e| CliError::io(&agg_path, e))?;
    Ok(outcomes)
}

fn cell_path(cfg: &ExperimentConfig, cell: &Cell, seed: u64) -> PathBuf {
    cfg.out_dir
        .join(cell.label())
        .join(format!("seed{seed}.csv"))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

fn write_aggregate<W: Write>(
    out: &mut W,
    cell: &Cell,
    recs: &[&TrajectoryRecord],
    steps: usize,
) -> std::io::Result<()> {
    if recs.is_empty() {
        return Ok(());
    }
    for t in 0..=steps {
        let col = |f: fn(&maskdyn::metrics::MetricsRow) -> f64| {
            mean_std(
                &recs
                    .iter()
                    .map(|r| f(&r.rows[t].metrics))
                    .collect::<Vec<_>>(),
            )
        };
        let (mu, mu_s) = col(|m| m.mu);
        let (phi, phi_s) = col(|m| m.phi);
        let (sr, sr_s) = col(|m| m.stable_rank);
        writeln!(
            out,
            "{},{},{},{t},{},{mu:e},{mu_s:e},{phi:e},{phi_s:e},{sr:e},{sr_s:e}",
            cell.mask.label(),
            cell.mode,
            cell.temperature,
            recs.len()
        )?;
    }
    Ok(())
}
