//! Optimal stopping `Ψ_s(t,x) = sup_τ E[φ(τ ∧ s, X^{t,x})]`.
//!
//! [`lsm_stop`] brackets the value by regression; [`exact_tree_stop`] solves it
//! exactly on the Bernoulli noise tree, carrying the whole stopped path as the
//! state of each tree node.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::noise::{derive_seed, NoiseKind};
use crate::parallel::par_map;
use crate::path::{DiscretePath, PathPrefix};
use crate::ppde::{ValueFn, TRAIN_TAG, VERIFY_TAG};
use crate::regression::{ridge_fit, FeatureMap, LinearFit, DEFAULT_RIDGE};
use crate::sde::{advance, mild_increment, simulate_mild_from, stepper_factors, SdeProblem};
use crate::stats::Estimate;

/// Largest `steps · dim_k` accepted by the tree solvers.
pub const TREE_CAP_BITS: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StopConfig {
    pub n_train_paths: usize,
    pub n_eval_paths: usize,
    pub seed: u64,
    pub features: FeatureMap,
    pub ridge: f64,
    #[serde(default)]
    pub noise: NoiseKind,
}

impl Default for StopConfig {
    fn default() -> Self {
        Self {
            n_train_paths: 4000,
            n_eval_paths: 4000,
            seed: 0,
            features: FeatureMap::constant_only(),
            ridge: DEFAULT_RIDGE,
            noise: NoiseKind::Gaussian,
        }
    }
}

/// First-trigger rule: stop at node `j` when `φ(t_j, x) ≥ C_j(x)`, with
/// `C_j` a regression of the continuation value. Always stops at `end`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoppingRule {
    pub features: FeatureMap,
    pub start: usize,
    pub end: usize,
    pub stop_at_start: bool,
    /// Indexed by node; `Some` for `start < j < end`.
    pub continuation: Vec<Option<LinearFit>>,
}

impl StoppingRule {
    pub fn triggers(&self, node: usize, payoff: f64, x: &PathPrefix<'_>) -> bool {
        if node >= self.end {
            return true;
        }
        if node == self.start {
            return self.stop_at_start;
        }
        match &self.continuation[node] {
            Some(c) => payoff >= c.predict(&self.features.eval(x)),
            None => true,
        }
    }

    /// Stopping node and payoff along a path from `start`.
    pub fn apply(&self, phi: &dyn ValueFn, path: &DiscretePath) -> (usize, f64) {
        let nf = self.features.len();
        let payoffs = phi.along(path, self.start);
        if self.stop_at_start {
            return (self.start, payoffs[0]);
        }
        let traj = self.features.trajectory(path, self.start);
        for j in self.start + 1..self.end {
            let k = j - self.start;
            if let Some(c) = &self.continuation[j] {
                if payoffs[k] >= c.predict(&traj[k * nf..(k + 1) * nf]) {
                    return (j, payoffs[k]);
                }
            }
        }
        (self.end, payoffs[self.end - self.start])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StopResult {
    /// Value of the rule on fresh paths (low-biased).
    pub low: Estimate,
    /// Backward regression value `max(φ, Ĉ)` (high-biased).
    pub high: Estimate,
    pub immediate: f64,
    pub rule: StoppingRule,
}

impl StopResult {
    pub fn gap(&self) -> f64 {
        self.high.mean - self.low.mean
    }
}

/// Longstaff–Schwartz on a training ensemble of `X^{t,x}` plus a fresh-seed
/// re-evaluation of the induced rule.
pub fn lsm_stop(
    phi: &dyn ValueFn,
    problem: &SdeProblem,
    node: usize,
    x: &DiscretePath,
    s: usize,
    cfg: &StopConfig,
) -> Result<StopResult> {
    let grid = *problem.grid();
    grid.check_node(s)?;
    if s < node {
        return Err(invalid("s", format!("stopping horizon node {s} precedes t node {node}")));
    }
    if cfg.n_train_paths < 2 || cfg.n_eval_paths < 1 {
        return Err(invalid("n_paths", "need at least 2 training and 1 evaluation path"));
    }
    cfg.features.validate(problem.model.dim_h)?;
    let p = problem.restarted(node, x)?;
    let immediate = phi.value(node, &x.prefix(node)?);
    let nf = cfg.features.len();
    let mut rule = StoppingRule {
        features: cfg.features.clone(),
        start: node,
        end: s,
        stop_at_start: true,
        continuation: vec![None; s + 1],
    };
    if s == node {
        return Ok(StopResult {
            low: Estimate::exact(immediate),
            high: Estimate::exact(immediate),
            immediate,
            rule,
        });
    }

    let factors = stepper_factors(&p.model, &grid);
    let train_seed = derive_seed(cfg.seed, TRAIN_TAG);
    let train = par_map(cfg.n_train_paths, |i| -> Result<(Vec<f64>, Vec<f64>)> {
        let key = p.noise(train_seed, i as u64, cfg.noise);
        let path = simulate_mild_from(&p, node, x, &key, &factors)?;
        let mut pay = phi.along(&path, node);
        pay.truncate(s - node + 1);
        let mut f = cfg.features.trajectory(&path, node);
        f.truncate((s - node + 1) * nf);
        Ok((pay, f))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut cash: Vec<f64> = train.iter().map(|(p, _)| p[s - node]).collect();
    let mut upper = cash.clone();
    for j in (node + 1..s).rev() {
        let k = j - node;
        let mut design = Vec::with_capacity(train.len() * nf);
        for (_, f) in &train {
            design.extend_from_slice(&f[k * nf..(k + 1) * nf]);
        }
        let c = ridge_fit(&design, nf, &cash, cfg.ridge, j)?;
        let d = ridge_fit(&design, nf, &upper, cfg.ridge, j)?;
        for (i, (pay, f)) in train.iter().enumerate() {
            let phi_j = pay[k];
            let feats = &f[k * nf..(k + 1) * nf];
            if phi_j >= c.predict(feats) {
                cash[i] = phi_j;
            }
            upper[i] = phi_j.max(d.predict(feats));
        }
        rule.continuation[j] = Some(c);
    }
    let cont = Estimate::from_samples(&cash);
    rule.stop_at_start = immediate >= cont.mean;
    let up = Estimate::from_samples(&upper);
    let high = if immediate >= up.mean {
        Estimate::exact(immediate)
    } else {
        up
    };

    let low = if rule.stop_at_start {
        Estimate::exact(immediate)
    } else {
        let eval_seed = derive_seed(cfg.seed, VERIFY_TAG);
        let samples = par_map(cfg.n_eval_paths, |i| -> Result<f64> {
            let key = p.noise(eval_seed, i as u64, cfg.noise);
            let path = simulate_mild_from(&p, node, x, &key, &factors)?;
            Ok(rule.apply(phi, &path).1)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Estimate::from_samples(&samples)
    };
    Ok(StopResult {
        low,
        high,
        immediate,
        rule,
    })
}

/// One node of the binary noise tree.
#[derive(Debug, Clone, Serialize)]
pub struct TreeNode {
    pub node: usize,
    /// Branch digits from the start, `dim_k` bits per step, most recent last.
    pub branch: u64,
    pub stop_value: f64,
    /// Expected value of continuing (NaN at the horizon).
    pub continuation_value: f64,
    pub value: f64,
    pub in_continuation: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeStop {
    pub value: f64,
    /// Every tree node, children before parents.
    pub nodes: Vec<TreeNode>,
}

impl TreeStop {
    pub fn root(&self) -> &TreeNode {
        self.nodes.last().expect("tree has a root")
    }
}

pub(crate) fn tree_guard(steps: usize, dim_k: usize) -> Result<()> {
    let bits = steps * dim_k;
    if bits > TREE_CAP_BITS {
        return Err(Error::TreeTooLarge {
            size: 1u128.checked_shl(bits as u32).unwrap_or(u128::MAX),
            cap: 1u128 << TREE_CAP_BITS,
        });
    }
    Ok(())
}

/// `±√Δ` increments for child `c` (bit `k` set means `+` in mode `k`).
pub(crate) fn branch_increments(c: usize, dim_k: usize, dt: f64, out: &mut [f64]) {
    let h = dt.sqrt();
    for (k, o) in out.iter_mut().enumerate().take(dim_k) {
        *o = if (c >> k) & 1 == 1 { h } else { -h };
    }
}

/// Exact backward induction over the Bernoulli tree from `(t, x)` to node `s`.
pub fn exact_tree_stop(
    phi: &dyn ValueFn,
    problem: &SdeProblem,
    node: usize,
    x: &DiscretePath,
    s: usize,
) -> Result<TreeStop> {
    let grid = *problem.grid();
    grid.check_node(node)?;
    grid.check_node(s)?;
    if s < node {
        return Err(invalid("s", format!("stopping horizon node {s} precedes t node {node}")));
    }
    let dim_k = problem.model.dim_k;
    tree_guard(s - node, dim_k)?;
    let mut walker = TreeWalker {
        problem,
        phi,
        factors: stepper_factors(&problem.model, &grid),
        dt: grid.dt(),
        s,
        dim_k,
        nodes: Vec::new(),
        b: vec![0.0; problem.model.dim_h],
        incr: vec![0.0; problem.model.dim_h],
    };
    let mut values = x.values()[..(node + 1) * x.dim()].to_vec();
    let value = walker.visit(&mut values, node, 0)?;
    Ok(TreeStop {
        value,
        nodes: walker.nodes,
    })
}

struct TreeWalker<'a> {
    problem: &'a SdeProblem,
    phi: &'a dyn ValueFn,
    factors: Vec<f64>,
    dt: f64,
    s: usize,
    dim_k: usize,
    nodes: Vec<TreeNode>,
    b: Vec<f64>,
    incr: Vec<f64>,
}

impl TreeWalker<'_> {
    fn visit(&mut self, values: &mut Vec<f64>, j: usize, branch: u64) -> Result<f64> {
        let grid = *self.problem.grid();
        let dim = self.factors.len();
        let stop_value = {
            let prefix = PathPrefix::new(grid, dim, values)?;
            self.phi.value(j, &prefix)
        };
        if j == self.s {
            self.nodes.push(TreeNode {
                node: j,
                branch,
                stop_value,
                continuation_value: f64::NAN,
                value: stop_value,
                in_continuation: false,
            });
            return Ok(stop_value);
        }
        let n_children = 1usize << self.dim_k;
        let weight = 1.0 / n_children as f64;
        let mut dw = vec![0.0; self.dim_k];
        let mut cont = 0.0;
        for c in 0..n_children {
            branch_increments(c, self.dim_k, self.dt, &mut dw);
            let (problem, dt) = (self.problem, self.dt);
            let b = &mut self.b;
            advance(&grid, &self.factors, values, j, &dw, &mut self.incr, &mut |jj, prefix, w, incr| {
                mild_increment(problem, jj, prefix, w, dt, b, incr)
            })?;
            cont += weight * self.visit(values, j + 1, (branch << self.dim_k) | c as u64)?;
            values.truncate((j + 1) * dim);
        }
        let value = stop_value.max(cont);
        self.nodes.push(TreeNode {
            node: j,
            branch,
            stop_value,
            continuation_value: cont,
            value,
            in_continuation: cont > stop_value,
        });
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{Diffusion, Drift, PathFunctional};
    use crate::path::Grid;
    use crate::spectral::SpectralModel;

    fn problem(n: usize, lambda: f64, sigma: f64) -> SdeProblem {
        let model = SpectralModel::new(1, vec![lambda], 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = Grid::new(n, 1.0).unwrap();
        SdeProblem::new(
            model,
            Drift::zero(),
            Diffusion::diagonal(1, 1, vec![sigma]),
            DiscretePath::constant(grid, &[1.0]),
            0,
        )
        .unwrap()
    }

    #[test]
    fn monotone_payoffs_in_time() {
        let p = problem(8, -1.0, 0.3);
        let cfg = StopConfig {
            n_train_paths: 100,
            n_eval_paths: 100,
            ..StopConfig::default()
        };
        let up = lsm_stop(&PathFunctional::time_linear(1.0), &p, 0, &p.initial, 8, &cfg).unwrap();
        assert_eq!(up.low.mean, 1.0);
        assert_eq!(up.high.mean, 1.0);
        let down = lsm_stop(&PathFunctional::time_linear(-1.0), &p, 2, &p.initial, 8, &cfg).unwrap();
        assert!(down.rule.stop_at_start);
        assert_eq!(down.low.mean, -0.25);
    }

    #[test]
    fn deterministic_tree_is_max_along_path() {
        let p = problem(4, -1.0, 0.0);
        let phi = PathFunctional::new(|j, x| x.current()[0] * (j as f64 + 1.0));
        let tree = exact_tree_stop(&phi, &p, 0, &p.initial, 4).unwrap();
        let best = (0..=4)
            .map(|j| (-(j as f64) / 4.0).exp() * (j as f64 + 1.0))
            .fold(f64::MIN, f64::max);
        assert!((tree.value - best).abs() < 1e-14);
    }

    #[test]
    fn one_step_martingale_boundary() {
        let p = problem(1, 0.0, 1.0);
        let tree = exact_tree_stop(&PathFunctional::endpoint(vec![1.0]), &p, 0, &p.initial, 1).unwrap();
        let root = tree.root();
        assert_eq!(root.stop_value, 1.0);
        assert_eq!(root.continuation_value, 1.0);
        assert!(!root.in_continuation);
    }

    #[test]
    fn tree_guard_rejects_large_instances() {
        let p = problem(21, -1.0, 1.0);
        let err = exact_tree_stop(&PathFunctional::constant(0.0), &p, 0, &p.initial, 21).unwrap_err();
        assert!(matches!(err, Error::TreeTooLarge { .. }));
    }
}
