use nalgebra::DMatrix;
use proptest::prelude::*;

use maskdyn::dynamics::{
    run_trajectory, step, DynamicsError, LayerWeights, Mode, RecordPlan, ScheduleKind, ScoreInput,
    WeightSchedule,
};
use maskdyn::mask::{MaskGraph, MaskKind};
use maskdyn::metrics::{column_oscillations, mu, one_minus_phi};
use maskdyn::numerics::{random_orthogonal, sample_sphere_rows, seeded_rng, TokenMatrix};
use maskdyn::theory::{
    all_sign_vectors, construct_equilibrium, empirical_epsilon, verify_mu_envelope,
    verify_oscillation_contraction, RESIDUAL_TOL,
};

const MODES: [Mode; 4] = [
    Mode::San,
    Mode::PostLn,
    Mode::PreLn(ScoreInput::Raw),
    Mode::PreLn(ScoreInput::Normalized),
];

fn digraph(self_loops: bool) -> impl Strategy<Value = MaskGraph> {
    (1usize..=12)
        .prop_flat_map(move |n| {
            (
                Just(n),
                prop::collection::vec(prop::bool::weighted(0.3), n * n),
            )
        })
        .prop_map(move |(n, adj)| {
            let edges: Vec<(usize, usize)> = (0..n)
                .flat_map(|j| (0..n).map(move |i| (j, i)))
                .filter(|&(j, i)| adj[j * n + i] || (self_loops && i == j))
                .collect();
            MaskGraph::from_edges(n, &edges).unwrap()
        })
}

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-scale..scale, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

/// Nonzero rows so that every LayerNorm is defined.
fn tokens(n: usize, d: usize) -> impl Strategy<Value = TokenMatrix> {
    matrix(n, d, 2.0).prop_filter_map("zero row", |m| {
        m.row_iter()
            .all(|r| r.norm() > 1e-3)
            .then(|| TokenMatrix::new(m).unwrap())
    })
}

/// Mask with self-loops, weights with entries in `[-1, 1]` and a matching
/// state.
fn triple() -> impl Strategy<Value = (MaskGraph, LayerWeights, TokenMatrix)> {
    (digraph(true), 1usize..=5).prop_flat_map(|(g, d)| {
        let n = g.n();
        (
            Just(g),
            matrix(d, d, 1.0),
            matrix(d, d, 1.0),
            matrix(d, d, 1.0),
            0.5f64..8.0,
            tokens(n, d),
        )
            .prop_map(|(g, q, k, v, temp, x)| (g, LayerWeights::new(q, k, v, temp).unwrap(), x))
    })
}

/// Reachability by transitive closure and hop distances by Floyd-Warshall.
struct Oracle {
    reach: Vec<Vec<bool>>,
    dist: Vec<Vec<Option<usize>>>,
}

impl Oracle {
    fn new(g: &MaskGraph) -> Self {
        let n = g.n();
        let mut reach = vec![vec![false; n]; n];
        let mut dist = vec![vec![None; n]; n];
        for j in 0..n {
            reach[j][j] = true;
            dist[j][j] = Some(0);
        }
        for (j, i) in g.edges() {
            reach[j][i] = true;
            if i != j {
                dist[j][i] = Some(1);
            }
        }
        for k in 0..n {
            for a in 0..n {
                for b in 0..n {
                    reach[a][b] |= reach[a][k] && reach[k][b];
                    if let (Some(x), Some(y)) = (dist[a][k], dist[k][b]) {
                        if dist[a][b].is_none_or(|d| x + y < d) {
                            dist[a][b] = Some(x + y);
                        }
                    }
                }
            }
        }
        Oracle { reach, dist }
    }

    fn centers(&self) -> Vec<usize> {
        (0..self.reach.len())
            .filter(|&s| self.reach[s].iter().all(|&r| r))
            .collect()
    }

    fn eccentricity(&self, s: usize) -> usize {
        self.dist[s].iter().map(|d| d.unwrap()).max().unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn classification_matches_closure_oracle(g in prop::bool::ANY.prop_flat_map(digraph)) {
        let c = g.classify();
        let o = Oracle::new(&g);
        let n = g.n();
        let centers = o.centers();
        let strongly = centers.len() == n;
        prop_assert_eq!(c.has_self_loops, (0..n).all(|i| g.has_edge(i, i)));
        prop_assert_eq!(c.strongly_connected, strongly);
        prop_assert_eq!(c.quasi_strongly_connected, !centers.is_empty());
        prop_assert_eq!(&c.center_nodes, &centers);
        prop_assert_eq!(c.center_count, centers.len());
        prop_assert_eq!(c.radius, centers.iter().map(|&s| o.eccentricity(s)).min());
        prop_assert_eq!(c.diameter, strongly.then(|| (0..n).map(|s| o.eccentricity(s)).max().unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn adding_an_edge_keeps_centers(g in digraph(false), j in 0usize..12, i in 0usize..12) {
        let n = g.n();
        let (j, i) = (j % n, i % n);
        let mut edges: Vec<_> = g.edges().collect();
        if !g.has_edge(j, i) {
            edges.push((j, i));
        }
        let bigger = MaskGraph::from_edges(n, &edges).unwrap();
        let (before, after) = (g.classify(), bigger.classify());
        prop_assert!(!before.quasi_strongly_connected || after.quasi_strongly_connected);
        prop_assert!(!before.strongly_connected || after.strongly_connected);
        prop_assert!(before.center_nodes.iter().all(|c| after.center_nodes.contains(c)));
        if let (Some(r0), Some(r1)) = (before.radius, after.radius) {
            prop_assert!(r1 <= r0);
        }
    }

    #[test]
    fn attention_invariants_along_trajectories((g, lw, x) in triple(), mode in 0usize..4) {
        let mut x = x;
        for _ in 0..4 {
            let out = match step(&x, &lw, &g, MODES[mode]) {
                Ok(out) => out,
                // a singular W_V can send a row to zero before LayerNorm
                Err(e) => { prop_assert!(matches!(e, DynamicsError::ZeroRow { .. }), "{}", e); return Ok(()); }
            };
            let a = &out.attention;
            prop_assert!(a.max_row_sum_error() <= 1e-12);
            prop_assert!(a.sparsity_matches(&g));
            prop_assert!(a.as_matrix().iter().all(|&v| v >= 0.0));
            x = out.state;
        }
    }

    #[test]
    fn san_with_identity_value_never_widens_columns((g, lw, x) in triple()) {
        let lw = LayerWeights::new(lw.query, lw.key, DMatrix::identity(x.dim(), x.dim()), lw.temperature).unwrap();
        let mut x = x;
        for _ in 0..5 {
            let next = step(&x, &lw, &g, Mode::San).unwrap().state;
            for (before, after) in column_oscillations(&x).into_iter().zip(column_oscillations(&next)) {
                prop_assert!(after <= before * (1.0 + 1e-12) + 1e-14, "{} > {}", after, before);
            }
            x = next;
        }
    }

    #[test]
    fn post_ln_tokens_stay_on_the_sphere((g, lw, x) in triple()) {
        let mut x = x;
        for _ in 0..6 {
            match step(&x, &lw, &g, Mode::PostLn) {
                Ok(out) => x = out.state,
                // a singular W_V can send a row to zero; the error is reported, not hidden
                Err(e) => { prop_assert!(matches!(e, DynamicsError::ZeroRow { .. }), "{}", e); return Ok(()); }
            }
            prop_assert!(x.has_unit_rows(1e-12));
        }
    }

    #[test]
    fn post_ln_ignores_value_scale((g, lw, x) in triple(), c in 0.01f64..100.0) {
        let scaled = LayerWeights::new(lw.query.clone(), lw.key.clone(), &lw.value * c, lw.temperature).unwrap();
        let (mut a, mut b) = (x.clone(), x);
        for _ in 0..4 {
            let (Ok(sa), Ok(sb)) = (step(&a, &lw, &g, Mode::PostLn), step(&b, &scaled, &g, Mode::PostLn)) else {
                return Ok(());
            };
            a = sa.state;
            b = sb.state;
            prop_assert!((a.as_matrix() - b.as_matrix()).amax() <= 1e-9, "{}", (a.as_matrix() - b.as_matrix()).amax());
        }
    }

    #[test]
    fn rotating_tokens_and_weights_commutes((g, lw, x) in triple(), seed in any::<u64>(), mode in 0usize..2, zero_qk in any::<bool>()) {
        let d = x.dim();
        let z = random_orthogonal(d, &mut seeded_rng(seed));
        let (q, k) = if zero_qk {
            (DMatrix::zeros(d, d), DMatrix::zeros(d, d))
        } else {
            (lw.query.clone(), lw.key.clone())
        };
        let base = LayerWeights::new(q.clone(), k.clone(), lw.value.clone(), lw.temperature).unwrap();
        let rotated = LayerWeights::new(z.transpose() * q, z.transpose() * k, z.transpose() * &lw.value * &z, lw.temperature).unwrap();
        let mode = [Mode::San, Mode::PostLn][mode];
        let mut a = x.clone();
        let mut b = TokenMatrix::new(x.as_matrix() * &z).unwrap();
        for _ in 0..4 {
            let (Ok(sa), Ok(sb)) = (step(&a, &base, &g, mode), step(&b, &rotated, &g, mode)) else {
                return Ok(());
            };
            a = sa.state;
            b = sb.state;
            let expected = a.as_matrix() * &z;
            let scale = expected.amax().max(1.0);
            prop_assert!((b.as_matrix() - &expected).amax() <= 1e-9 * scale);
        }
    }

    #[test]
    fn mu_is_a_translation_invariant_seminorm(
        (x, y) in (1usize..8, 1usize..6).prop_flat_map(|(n, d)| (matrix(n, d, 3.0), matrix(n, d, 3.0))),
        c in -5.0f64..5.0,
        shift in prop::collection::vec(-10.0f64..10.0, 6),
    ) {
        let tol = 1e-12 * (1.0 + x.norm() + y.norm());
        let mut shifted = x.clone();
        for mut row in shifted.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += shift[j];
            }
        }
        prop_assert!((mu(&shifted) - mu(&x)).abs() <= 1e-11 * (1.0 + shifted.norm()));
        prop_assert!((mu(&(&x * c)) - c.abs() * mu(&x)).abs() <= tol * (1.0 + c.abs()));
        prop_assert!(mu(&(&x + &y)) <= mu(&x) + mu(&y) + tol);
        prop_assert!((mu(&x) - mu(&y)).abs() <= (&x - &y).norm() + tol);
        prop_assert!(mu(&x) >= 0.0);
    }

    #[test]
    fn phi_gap_dominates_half_squared_distances((n, d, seed) in (2usize..8, 1usize..6, any::<u64>())) {
        let x = sample_sphere_rows(n, d, &mut seeded_rng(seed));
        let gap = one_minus_phi(&x).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dist2 = (x.row(i) - x.row(j)).norm_squared();
                prop_assert!(gap >= dist2 / 2.0 - 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn equilibrium_variants_are_distinct((n, k_seed, w) in (2usize..=4, any::<usize>(), 0.0f64..1.0)) {
        let d = n;
        let k = 1 + k_seed % d;
        // w must reach N - k + 1 for a nontrivial block
        let w = (n as f64 + 0.01) + w * (100.0 - n as f64);
        let variants: Vec<_> = all_sign_vectors(k)
            .into_iter()
            .map(|s| construct_equilibrium(n, d, k, w, &s).unwrap())
            .collect();
        for eq in &variants {
            prop_assert!(eq.residual().unwrap() <= RESIDUAL_TOL);
            prop_assert_eq!(eq.rank(), k);
        }
        for a in 0..variants.len() {
            for b in a + 1..variants.len() {
                let dist = (variants[a].x.as_matrix() - variants[b].x.as_matrix()).norm();
                prop_assert!(dist > 0.1, "w = {w}, k = {k}: {dist}");
            }
        }
    }
}

#[test]
fn radius_formulas() {
    for n in 2..=20 {
        assert_eq!(MaskGraph::complete(n).unwrap().classify().radius, Some(1));
        assert_eq!(MaskGraph::causal(n).unwrap().classify().radius, Some(1));
        for width in 1..=4 {
            let g = MaskGraph::build(&MaskKind::UnidirectionalSlidingWindow { width }, n).unwrap();
            assert_eq!(
                g.classify().radius,
                Some((n - 1).div_ceil(width)),
                "n={n} width={width}"
            );
        }
    }
}

#[test]
fn san_runs_respect_collapse_bounds() {
    let (n, d, steps) = (8, 8, 40);
    let mut checked = 0;
    for (k, kind) in [
        MaskKind::Complete,
        MaskKind::Causal,
        MaskKind::SlidingWindow { width: 1 },
    ]
    .iter()
    .enumerate()
    {
        let g = MaskGraph::build(kind, n).unwrap();
        let r = g.classify().radius.unwrap().max(1);
        for seed in 0..50u64 {
            let s = WeightSchedule::new(
                ScheduleKind::RandomBounded { qk_norm: 1.0, seed },
                d,
                steps,
                d as f64,
            )
            .unwrap();
            let x0 = sample_sphere_rows(n, d, &mut seeded_rng(1000 * k as u64 + seed));
            let plan = RecordPlan {
                keep_attention: true,
                ..RecordPlan::default()
            };
            let rec = run_trajectory(&x0, &s, &g, Mode::San, steps, &plan).unwrap();
            let osc = verify_oscillation_contraction(&rec.attention, &g).unwrap();
            assert!(osc.pass, "{kind:?} seed {seed}: {:?}", osc.violations);
            let eps = empirical_epsilon(&rec.attention, &g).unwrap();
            let env = verify_mu_envelope(&rec.mu_series(), eps, r, 1.0, n).unwrap();
            assert!(env.pass, "{kind:?} seed {seed}: {:?}", env.violations);
            checked += osc.block_factors.len();
        }
    }
    assert!(checked > 0);
}
