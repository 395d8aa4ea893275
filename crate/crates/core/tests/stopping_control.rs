mod common;

use std::collections::HashMap;

use common::ou;
use ppde_core::coeffs::{ControlledDiffusion, ControlledDrift, Diffusion, Drift, PathFunctional, RunningCost};
use ppde_core::control::{
    dpp_check, gain_estimate, hjb_viscosity_check, mixed_stop_control, value_function, FeedbackConfig, PolicySnapshot,
    SearchConfig,
};
use ppde_core::noise::NoiseKind;
use ppde_core::path::{DiscretePath, Grid};
use ppde_core::regression::FeatureMap;
use ppde_core::sde::{Action, ControlPolicy, ControlledSdeProblem, SdeProblem};
use ppde_core::spectral::SpectralModel;
use ppde_core::stopping::{exact_tree_stop, lsm_stop, StopConfig, TreeStop};

const SIGMA: f64 = 0.5;

/// All values `x_j` along the Bernoulli branch with bits `b` (most recent last).
fn branch_values(x0: f64, dt: f64, bits: &[bool]) -> Vec<f64> {
    let mut out = vec![x0];
    for &up in bits {
        let dw = if up { dt.sqrt() } else { -dt.sqrt() };
        let last = *out.last().unwrap();
        out.push((-dt).exp() * (last + SIGMA * dw));
    }
    out
}

/// Best of every stopping rule on the depth-`n` tree, by brute force.
fn enumerate_rules(x0: f64, n: usize) -> f64 {
    let dt = 1.0 / n as f64;
    let interior = (1usize << n) - 1;
    let mut best = f64::NEG_INFINITY;
    for rule in 0u64..(1u64 << interior) {
        let mut total = 0.0;
        for leaf in 0..(1usize << n) {
            let bits: Vec<bool> = (0..n).map(|k| (leaf >> (n - 1 - k)) & 1 == 1).collect();
            let xs = branch_values(x0, dt, &bits);
            // tree node at depth d on this branch has heap index 2^d - 1 + prefix
            let mut stopped = xs[n];
            for d in 0..n {
                let prefix = leaf >> (n - d);
                if (rule >> ((1usize << d) - 1 + prefix)) & 1 == 1 {
                    stopped = xs[d];
                    break;
                }
            }
            total += stopped;
        }
        best = best.max(total / (1usize << n) as f64);
    }
    best
}

fn ou_at(x0: f64, n: usize) -> SdeProblem {
    ou(n, 1.0, SIGMA, x0)
}

#[test]
fn tree_matches_exhaustive_rule_enumeration() {
    for x0 in [1.0, -0.5, 0.0] {
        let p = ou_at(x0, 3);
        let phi = PathFunctional::endpoint(vec![1.0]);
        let tree = exact_tree_stop(&phi, &p, 0, &p.initial, 3).unwrap();
        let brute = enumerate_rules(x0, 3);
        assert!((tree.value - brute).abs() <= 1e-12, "x0 {x0}: {} vs {brute}", tree.value);
    }
}

fn children(tree: &TreeStop) -> HashMap<(usize, u64), f64> {
    tree.nodes.iter().map(|n| ((n.node, n.branch), n.value)).collect()
}

#[test]
fn snell_envelope_dominates_and_is_a_supermartingale() {
    let p = ou_at(-0.3, 6);
    let phi = PathFunctional::new(|_, x| (x.current()[0] - 0.1).max(0.0) + 0.5 * x.running_integral(0));
    let tree = exact_tree_stop(&phi, &p, 1, &p.initial, 6).unwrap();
    let by_key = children(&tree);
    assert_eq!(tree.nodes.len(), (1 << 6) - 1);
    for n in &tree.nodes {
        assert!(n.value >= n.stop_value);
        if n.node < 6 {
            let mean = 0.5 * (by_key[&(n.node + 1, n.branch << 1)] + by_key[&(n.node + 1, (n.branch << 1) | 1)]);
            assert!(n.value >= mean);
            assert_eq!(n.value, n.stop_value.max(mean));
            assert_eq!(n.in_continuation, mean > n.stop_value);
        } else {
            assert_eq!(n.value, n.stop_value);
        }
    }
}

fn lsm_cfg(seed: u64) -> StopConfig {
    StopConfig {
        n_train_paths: 4000,
        n_eval_paths: 20000,
        seed,
        features: FeatureMap::polynomial(0, 3),
        noise: NoiseKind::Bernoulli,
        ..StopConfig::default()
    }
}

#[test]
fn regression_stopping_brackets_exact_value() {
    for (x0, seed) in [(1.0, 1), (-0.5, 2), (0.0, 3)] {
        let p = ou_at(x0, 3);
        let phi = PathFunctional::endpoint(vec![1.0]);
        let exact = exact_tree_stop(&phi, &p, 0, &p.initial, 3).unwrap().value;
        let r = lsm_stop(&phi, &p, 0, &p.initial, 3, &lsm_cfg(seed)).unwrap();
        assert!(r.low.mean <= exact + 3.0 * r.low.stderr, "x0 {x0}: low {:?} exact {exact}", r.low);
        assert!(r.high.mean >= exact - 3.0 * r.high.stderr, "x0 {x0}: high {:?} exact {exact}", r.high);
        let scale = exact.abs().max(r.immediate.abs()).max(0.1);
        assert!(r.gap() / scale < 0.02, "x0 {x0}: gap {}", r.gap());
        assert!(r.low.mean >= r.immediate - 3.0 * r.low.stderr);
    }
}

#[test]
fn stopping_rule_serializes() {
    let p = ou_at(-0.5, 3);
    let phi = PathFunctional::endpoint(vec![1.0]);
    let r = lsm_stop(&phi, &p, 0, &p.initial, 3, &lsm_cfg(4)).unwrap();
    let json = serde_json::to_string(&r.rule).unwrap();
    let back: ppde_core::stopping::StoppingRule = serde_json::from_str(&json).unwrap();
    let path = common::typical_path(&p, 9);
    assert_eq!(back.apply(&phi, &path), r.rule.apply(&phi, &path));
}

#[test]
fn stopping_now_is_the_value_at_the_horizon() {
    let p = ou_at(0.7, 4);
    let phi = PathFunctional::endpoint(vec![1.0]);
    let tree = exact_tree_stop(&phi, &p, 2, &p.initial, 2).unwrap();
    assert_eq!(tree.value, 0.7);
    assert_eq!(tree.nodes.len(), 1);
}

/// `dX = (-X + a) dt + σ dW` with `a ∈ {-1, +1}`.
fn two_action_ou(n: usize, sigma: f64) -> ControlledSdeProblem {
    let model = SpectralModel::new(1, vec![-1.0], 0.0, 1.0, sigma.max(1e-3), 1.0).unwrap();
    let grid = Grid::new(n, 1.0).unwrap();
    ControlledSdeProblem::new(
        model,
        ControlledDrift::action_shift(Drift::zero(), 0),
        ControlledDiffusion::Uncontrolled(Diffusion::diagonal(1, 1, vec![sigma])),
        vec![Action::new("down", -1.0), Action::new("up", 1.0)],
        DiscretePath::constant(grid, &[0.2]),
        0,
    )
    .unwrap()
}

fn search(seed: u64) -> SearchConfig {
    SearchConfig {
        n_paths: 500,
        n_outer_paths: 100,
        seed,
        ..SearchConfig::default()
    }
}

/// Mean of the mild scheme from `(node, x)` under a constant action.
fn constant_action_mean(x: f64, a: f64, steps: usize, dt: f64) -> f64 {
    let mut m = x;
    for _ in 0..steps {
        m = (-dt).exp() * (m + a * dt);
    }
    m
}

#[test]
fn two_action_value_matches_closed_form() {
    let cp = two_action_ou(4, SIGMA);
    let xi = PathFunctional::endpoint(vec![1.0]);
    let v = value_function(&cp, &RunningCost::zero(), &xi, 0, &cp.initial, &search(5)).unwrap();
    assert!(v.exhaustive);
    assert_eq!(v.evaluated, 16);
    match &v.policy {
        PolicySnapshot::OpenLoop { actions, .. } => assert_eq!(actions, &vec![1; 4]),
        other => panic!("{other:?}"),
    }
    let exact = constant_action_mean(0.2, 1.0, 4, 0.25);
    assert!((v.estimate.mean - exact).abs() <= 3.0 * v.estimate.stderr, "{:?} vs {exact}", v.estimate);
}

#[test]
fn dpp_holds_at_probes() {
    let cp = two_action_ou(4, SIGMA);
    let xi = PathFunctional::endpoint(vec![1.0]);
    let grid = *cp.grid();
    for (k, (node, tau, x)) in [(0, 2, 0.2), (0, 1, -0.4), (1, 3, 0.5), (2, 4, 0.0), (1, 2, 1.0)].iter().enumerate() {
        let path = DiscretePath::constant(grid, &[*x]);
        let d = dpp_check(&cp, &RunningCost::zero(), &xi, *node, &path, *tau, &search(10 + k as u64)).unwrap();
        assert!(!d.saturated);
        assert_eq!(d.pass, Some(true), "probe {k}: z = {}", d.z);
    }
}

#[test]
fn hjb_viscosity_property_of_value() {
    let cp = two_action_ou(4, SIGMA);
    let xi = PathFunctional::endpoint(vec![1.0]);
    let grid = *cp.grid();
    let probes: Vec<(usize, DiscretePath)> =
        (0..6).map(|i| (i % 4, DiscretePath::constant(grid, &[-0.5 + 0.2 * i as f64]))).collect();
    let r = hjb_viscosity_check(&cp, &RunningCost::zero(), &xi, &probes, 1, &search(20)).unwrap();
    assert!(r.all_pass(), "{:?}", r.rows);
    assert!(r.rows.iter().all(|row| row.best_action == 1));
    assert!(r.structure.is_none());
}

#[test]
fn structure_condition_detects_mismatch() {
    let xi = PathFunctional::constant(0.0);
    let cp = two_action_ou(2, SIGMA).with_structure(ControlledDrift::new(|_, _, a, out| out[0] = a / SIGMA));
    let probes = [(0, cp.initial.clone())];
    let r = hjb_viscosity_check(&cp, &RunningCost::zero(), &xi, &probes, 1, &search(21)).unwrap();
    assert!(r.structure.as_ref().unwrap().consistent);
    let bad = two_action_ou(2, SIGMA).with_structure(ControlledDrift::new(|_, _, a, out| out[0] = a));
    let r = hjb_viscosity_check(&bad, &RunningCost::zero(), &xi, &probes, 1, &search(21)).unwrap();
    let s = r.structure.unwrap();
    assert!(!s.consistent);
    assert!((s.max_discrepancy - 0.5).abs() < 1e-12);
}

#[test]
fn running_cost_is_charged_at_the_left_point() {
    let cp = two_action_ou(4, 0.0);
    let ell = RunningCost::action_cost(0.3);
    let xi = PathFunctional::constant(0.0);
    let policy = ControlPolicy::constant(1, 4);
    let e = gain_estimate(&cp, &ell, &xi, 0, &cp.initial, &policy, 3, 1, NoiseKind::Gaussian).unwrap();
    let per_step = ell.eval(0, &cp.initial.prefix(0).unwrap(), 1.0);
    assert!((e.mean - 4.0 * 0.25 * per_step).abs() < 1e-12);
}

#[test]
fn feedback_policy_is_offered_alongside_open_loop() {
    // payoff |x_T| rewards pushing away from zero in the direction already taken
    let cp = two_action_ou(4, SIGMA);
    let xi = PathFunctional::new(|_, x| x.current()[0].abs());
    let cfg = SearchConfig {
        feedback: Some(FeedbackConfig {
            features: FeatureMap::polynomial(0, 1),
            n_train_paths: 4000,
            ridge: 1e-8,
        }),
        ..search(30)
    };
    let mut start = cp.initial.clone();
    for j in 0..=4 {
        start.row_mut(j)[0] = 0.0;
    }
    let v = value_function(&cp, &RunningCost::zero(), &xi, 0, &start, &cfg).unwrap();
    let open = value_function(&cp, &RunningCost::zero(), &xi, 0, &start, &search(30)).unwrap();
    assert_eq!(v.evaluated, open.evaluated + 1);
    assert!(v.estimate.mean >= open.estimate.mean);
    assert!(matches!(v.policy, PolicySnapshot::Feedback(_)), "{:?} vs {:?}", v.estimate, open.estimate);
}

#[test]
fn mixed_problem_is_monotone_in_the_action_set() {
    let cp = two_action_ou(5, SIGMA);
    let phi = PathFunctional::new(|_, x| x.current()[0] * x.current()[0]);
    let full = mixed_stop_control(&phi, &cp, 0, &cp.initial, 5).unwrap();
    for keep in [0usize, 1] {
        let sub = cp.with_actions(&[keep]).unwrap();
        let m = mixed_stop_control(&phi, &sub, 0, &sub.initial, 5).unwrap();
        assert!(m.value <= full.value);
        // a single action is plain optimal stopping of the frozen problem
        let frozen = cp.frozen(keep);
        let tree = exact_tree_stop(&phi, &frozen, 0, &frozen.initial, 5).unwrap();
        assert!((m.value - tree.value).abs() <= 1e-12, "{} vs {}", m.value, tree.value);
    }
}
