mod common;

use proptest::prelude::*;

use ppde_core::coeffs::{
    ControlledDiffusion, ControlledDrift, Diffusion, Drift, Nonlinearity, PathFunctional, RunningCost,
};
use ppde_core::control::{dpp_check, value_function, SearchConfig};
use ppde_core::noise::{NoiseKind, NoiseStream};
use ppde_core::path::{assert_non_anticipative, d_infty, stop_path, DiscretePath, Grid};
use ppde_core::ppde::{picard_solve, SolverConfig, ValueFn};
use ppde_core::regression::FeatureMap;
use ppde_core::sde::{flow_check, Action, ControlledSdeProblem, SdeProblem};
use ppde_core::spectral::{critical_exponent, hs_norm, HilbertVec, OperatorMatrix, SpectralModel};

fn eigenvalues() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..0.0f64, 1..6)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = OperatorMatrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |v| {
        let mut m = OperatorMatrix::zeros(rows, cols);
        for r in 0..rows {
            m.row_mut(r).copy_from_slice(&v[r * cols..(r + 1) * cols]);
        }
        m
    })
}

fn grid8() -> Grid {
    Grid::new(8, 1.0).unwrap()
}

fn path(dim: usize) -> impl Strategy<Value = DiscretePath> {
    prop::collection::vec(-2.0..2.0f64, 9 * dim)
        .prop_map(move |v| DiscretePath::from_values(grid8(), dim, v).unwrap())
}

fn node_time() -> impl Strategy<Value = f64> {
    (0usize..=8).prop_map(|j| j as f64 / 8.0)
}

proptest! {
    #[test]
    fn semigroup_law(eig in eigenvalues(), s in 0.0..2.0f64, r in 0.0..2.0f64, seed in any::<u64>()) {
        let model = SpectralModel::new(1, eig.clone(), 0.0, 1.0, 1.0, 1.0).unwrap();
        let v = HilbertVec((0..eig.len()).map(|k| ((seed >> k) & 0xff) as f64 / 64.0 - 2.0).collect());
        let once = model.semigroup_apply(s + r, &v).unwrap();
        let twice = model.semigroup_apply(s, &model.semigroup_apply(r, &v).unwrap()).unwrap();
        // exp(λ(s+r)) inherits the rounding of its argument
        for ((a, b), l) in once.0.iter().zip(&twice.0).zip(&eig) {
            let ulps = 4.0 * (1.0 + l.abs() * (s + r));
            prop_assert!((a - b).abs() <= ulps * f64::EPSILON * a.abs().max(b.abs()) + f64::MIN_POSITIVE);
        }
        prop_assert!(once.norm() <= v.norm());
    }

    #[test]
    fn hs_norm_is_a_norm(a in matrix(3, 2), b in matrix(3, 2), c in -5.0..5.0f64) {
        let scaled = hs_norm(&a.scale(c));
        prop_assert!((scaled - c.abs() * hs_norm(&a)).abs() <= 1e-12 * (1.0 + scaled));
        prop_assert!(hs_norm(&a.add(&b).unwrap()) <= hs_norm(&a) + hs_norm(&b) + 1e-12);
    }

    #[test]
    fn critical_exponent_increases(g1 in 0.0..0.499f64, g2 in 0.0..0.499f64) {
        prop_assume!(g1 < g2);
        prop_assert!(critical_exponent(g1).unwrap() < critical_exponent(g2).unwrap());
    }

    #[test]
    fn d_infty_is_a_pseudometric(
        a in path(2), b in path(2), c in path(2),
        ta in node_time(), tb in node_time(), tc in node_time(),
    ) {
        let d = |x: (f64, &DiscretePath), y: (f64, &DiscretePath)| d_infty(x, y).unwrap();
        prop_assert_eq!(d((ta, &a), (ta, &a)), 0.0);
        prop_assert_eq!(d((ta, &a), (tb, &b)), d((tb, &b), (ta, &a)));
        prop_assert!(d((ta, &a), (tc, &c)) <= d((ta, &a), (tb, &b)) + d((tb, &b), (tc, &c)) + 1e-12);
    }

    #[test]
    fn stopping_is_idempotent_and_monotone(x in path(2), t in node_time(), t2 in node_time()) {
        let s = stop_path(&x, t).unwrap();
        prop_assert_eq!(stop_path(&s, t).unwrap(), s.clone());
        let (lo, hi) = if t <= t2 { (t, t2) } else { (t2, t) };
        prop_assert_eq!(stop_path(&stop_path(&x, hi).unwrap(), lo).unwrap(), stop_path(&x, lo).unwrap());
    }

    #[test]
    fn d_infty_sees_only_stopped_paths(x in path(1), y in path(1), t in node_time(), t2 in node_time()) {
        let sx = stop_path(&x, t).unwrap();
        prop_assert_eq!(d_infty((t, &x), (t2, &y)).unwrap(), d_infty((t, &sx), (t2, &y)).unwrap());
    }
}

/// One of several drifts, some of them path-dependent.
fn drift(kind: u8, coef: f64) -> Drift {
    match kind % 4 {
        0 => Drift::zero(),
        1 => Drift::affine(coef, vec![0.3, -0.1, 0.2]),
        2 => Drift::running_integral(coef),
        _ => Drift::running_sup(coef),
    }
}

fn random_problem(eig: Vec<f64>, kind: u8, coef: f64, sigma: f64, n: usize) -> SdeProblem {
    let dim = eig.len();
    let model = SpectralModel::new(dim, eig, 0.0, 1.0, sigma.max(1e-3), 1.0).unwrap();
    let grid = Grid::new(n, 1.0).unwrap();
    let start: Vec<f64> = (0..dim).map(|k| 0.5 - 0.2 * k as f64).collect();
    SdeProblem::new(
        model,
        drift(kind, coef),
        Diffusion::diagonal(dim, dim, vec![sigma; dim]),
        DiscretePath::constant(grid, &start),
        0,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flow_restart_is_exact(
        eig in prop::collection::vec(-20.0..0.0f64, 1..4),
        kind in any::<u8>(),
        coef in -1.0..1.0f64,
        sigma in 0.0..1.0f64,
        seed in any::<u64>(),
        s_node in 0usize..=32,
    ) {
        let p = random_problem(eig, kind, coef, sigma, 32);
        let key = NoiseStream::new(seed, 0, p.model.dim_k, NoiseKind::Gaussian);
        prop_assert_eq!(flow_check(&p, s_node as f64 / 32.0, &key).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_dpp_drift_is_exactly_zero(
        x0 in -1.0..1.0f64,
        node in 0usize..3,
        span in 1usize..3,
        lambda in -1.0..0.0f64,
    ) {
        let tau = (node + span).min(4);
        prop_assume!(tau > node);
        let model = SpectralModel::new(1, vec![lambda], 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = Grid::new(4, 1.0).unwrap();
        let cp = ControlledSdeProblem::new(
            model,
            ControlledDrift::action_shift(Drift::zero(), 0),
            ControlledDiffusion::Uncontrolled(Diffusion::zero(1, 1)),
            vec![Action::new("down", -1.0), Action::new("stay", 0.0), Action::new("up", 1.0)],
            DiscretePath::constant(grid, &[x0]),
            0,
        )
        .unwrap();
        let cfg = SearchConfig { n_paths: 2, n_outer_paths: 2, ..SearchConfig::default() };
        let xi = PathFunctional::new(|_, x| -(x.current()[0] - 0.3).powi(2));
        let d = dpp_check(&cp, &RunningCost::action_cost(0.2), &xi, node, &cp.initial, tau, &cfg).unwrap();
        prop_assert_eq!(d.drift.mean, 0.0);
        prop_assert_eq!(d.pass, Some(true));
    }

    #[test]
    fn larger_action_set_never_lowers_value(x0 in -1.0..1.0f64, seed in any::<u64>()) {
        let model = SpectralModel::new(1, vec![-1.0], 0.0, 1.0, 0.5, 1.0).unwrap();
        let grid = Grid::new(3, 1.0).unwrap();
        let cp = ControlledSdeProblem::new(
            model,
            ControlledDrift::action_shift(Drift::zero(), 0),
            ControlledDiffusion::Uncontrolled(Diffusion::diagonal(1, 1, vec![0.5])),
            vec![Action::new("down", -1.0), Action::new("stay", 0.0), Action::new("up", 1.0)],
            DiscretePath::constant(grid, &[x0]),
            0,
        )
        .unwrap();
        let xi = PathFunctional::new(|_, x| (x.current()[0] - 0.2).abs());
        let cfg = SearchConfig { n_paths: 300, seed, ..SearchConfig::default() };
        let ell = RunningCost::zero();
        let full = value_function(&cp, &ell, &xi, 0, &cp.initial, &cfg).unwrap();
        for keep in [vec![0usize], vec![1], vec![2], vec![0, 2]] {
            let sub = cp.with_actions(&keep).unwrap();
            let v = value_function(&sub, &ell, &xi, 0, &sub.initial, &cfg).unwrap();
            let tol = 3.0 * full.estimate.stderr.hypot(v.estimate.stderr);
            prop_assert!(v.estimate.mean <= full.estimate.mean + tol);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn solved_value_ignores_the_future(seed in any::<u64>(), j in 1usize..15, bump in -3.0..3.0f64) {
        let p = common::ou(16, 1.0, 0.5, 1.0);
        let cfg = SolverConfig {
            n_train_paths: 100,
            features: FeatureMap::standard(1),
            seed,
            ..SolverConfig::default()
        };
        let sol = picard_solve(&p, &Nonlinearity::saturating(1.0, 1.0, 0.1), &PathFunctional::sup_norm(), &cfg).unwrap();
        let u = sol.value;
        let x = common::typical_path(&p, seed ^ 1);
        let delta = DiscretePath::from_fn(*p.grid(), 1, |i, _| if i > j { bump } else { 0.0 });
        let report = assert_non_anticipative(|k, y| u.value(k, &y.prefix(k).unwrap()), &[(j, x, delta)]).unwrap();
        prop_assert!(report.passed());
    }
}

#[test]
fn critical_exponent_blows_up_near_one_half() {
    assert!(critical_exponent(0.499).unwrap() > 500.0);
    assert!(critical_exponent(0.5).is_err());
}
