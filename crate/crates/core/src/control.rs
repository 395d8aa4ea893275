//! Finite-action stochastic control with gain
//! `J(t,x,a) = E[∫_t^T ℓ(s, X, a_s) ds + ξ(X_T)]` and value `v = sup_a J`.
//!
//! The policy class is open-loop action lattices (exhaustive up to a cap,
//! coordinate ascent beyond) plus, optionally, one feedback policy obtained
//! by regression dynamic programming. Running gains use the left endpoint,
//! `Σ_{j} ℓ(t_j, X_{·∧t_j}, a_j) Δ`. Every Monte Carlo evaluation inside one
//! search shares its noise keys.

use serde::{Deserialize, Serialize};

use crate::coeffs::{PathFunctional, RunningCost};
use crate::error::{invalid, Error, Result};
use crate::noise::{derive_seed, NoiseKind, NoiseSource, NoiseStream};
use crate::parallel::par_map;
use crate::path::{DiscretePath, PathPrefix};
use crate::ppde::{ValueFn, TRAIN_TAG, VERIFY_TAG};
use crate::regression::{ridge_fit, FeatureMap, LinearFit, DEFAULT_RIDGE};
use crate::sde::{
    advance, controlled_increment, simulate_controlled_from, stepper_factors, ControlPolicy, ControlledSdeProblem,
};
use crate::stats::{bonferroni_z, Estimate};
use crate::stopping::{branch_increments, tree_guard, TREE_CAP_BITS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackConfig {
    pub features: FeatureMap,
    pub n_train_paths: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Largest open-loop lattice searched exhaustively.
    pub exhaustive_cap: u64,
    pub n_paths: usize,
    /// Outer paths of nested (DPP / HJB) estimators.
    pub n_outer_paths: usize,
    pub max_sweeps: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseKind,
    #[serde(default)]
    pub feedback: Option<FeedbackConfig>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            exhaustive_cap: 4096,
            n_paths: 2000,
            n_outer_paths: 400,
            max_sweeps: 20,
            seed: 0,
            noise: NoiseKind::Gaussian,
            feedback: None,
        }
    }
}

/// Regression feedback policy: at node `j` pick `argmax_a Q_{j,a}(x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackPolicy {
    pub features: FeatureMap,
    pub start: usize,
    /// `q[j - start][a]`.
    pub q: Vec<Vec<LinearFit>>,
}

impl FeedbackPolicy {
    pub fn action(&self, node: usize, x: &PathPrefix<'_>) -> usize {
        let phi = self.features.eval(x);
        argmax(self.q[node - self.start].iter().map(|f| f.predict(&phi))).0
    }

    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        let phi = self.features.eval(x);
        argmax(self.q[node - self.start].iter().map(|f| f.predict(&phi))).1
    }

    pub fn to_policy(&self) -> ControlPolicy {
        let p = self.clone();
        ControlPolicy::feedback(move |j, x| p.action(j, x))
    }
}

/// First index attaining the maximum.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum PolicySnapshot {
    /// Action indices for steps `start..n`.
    OpenLoop { start: usize, actions: Vec<usize> },
    Feedback(FeedbackPolicy),
}

#[derive(Debug, Clone, Serialize)]
pub struct ControlValue {
    pub estimate: Estimate,
    pub policy: PolicySnapshot,
    pub exhaustive: bool,
    /// Coordinate ascent hit `max_sweeps` without settling.
    pub saturated: bool,
    pub evaluated: usize,
}

struct SearchOutcome {
    actions: Vec<usize>,
    estimate: Estimate,
    exhaustive: bool,
    saturated: bool,
    evaluated: usize,
}

fn lattice_size(n_actions: usize, steps: usize) -> Option<u128> {
    (n_actions as u128).checked_pow(steps as u32)
}

/// Maximizes `eval` over `U^steps`; ties go to the lowest lexicographic policy.
fn lattice_search(
    steps: usize,
    n_actions: usize,
    cap: u64,
    max_sweeps: usize,
    eval: &dyn Fn(&[usize]) -> Result<Estimate>,
) -> Result<SearchOutcome> {
    let size = lattice_size(n_actions, steps);
    if let Some(size) = size.filter(|s| *s <= cap as u128) {
        let mut best: Option<(Vec<usize>, Estimate)> = None;
        let mut actions = vec![0usize; steps];
        for idx in 0..size {
            let mut rem = idx;
            for slot in actions.iter_mut().rev() {
                *slot = (rem % n_actions as u128) as usize;
                rem /= n_actions as u128;
            }
            let e = eval(&actions)?;
            if best.as_ref().is_none_or(|(_, b)| e.mean > b.mean) {
                best = Some((actions.clone(), e));
            }
        }
        let (actions, estimate) = best.expect("lattice is nonempty");
        return Ok(SearchOutcome {
            actions,
            estimate,
            exhaustive: true,
            saturated: false,
            evaluated: size as usize,
        });
    }
    let mut best: Option<(Vec<usize>, Estimate)> = None;
    let mut saturated = false;
    let mut evaluated = 0;
    for start in 0..n_actions {
        let mut actions = vec![start; steps];
        let mut current = eval(&actions)?;
        evaluated += 1;
        let mut settled = false;
        for _ in 0..max_sweeps {
            let mut changed = false;
            for j in 0..steps {
                let keep = actions[j];
                for a in 0..n_actions {
                    if a == keep {
                        continue;
                    }
                    actions[j] = a;
                    let e = eval(&actions)?;
                    evaluated += 1;
                    if e.mean > current.mean {
                        current = e;
                        changed = true;
                    } else {
                        actions[j] = keep;
                    }
                    if actions[j] != keep {
                        break;
                    }
                }
            }
            if !changed {
                settled = true;
                break;
            }
        }
        saturated |= !settled;
        if best.as_ref().is_none_or(|(_, b)| current.mean > b.mean) {
            best = Some((actions, current));
        }
    }
    let (actions, estimate) = best.expect("at least one action");
    Ok(SearchOutcome {
        actions,
        estimate,
        exhaustive: false,
        saturated,
        evaluated,
    })
}

/// `Σ_{from ≤ j < to} ℓ Δ + tail`, summed from the right so that splitting
/// the sum at any node reproduces the same floating-point value.
#[allow(clippy::too_many_arguments)]
fn gain_onto(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    path: &DiscretePath,
    taken: &[usize],
    from: usize,
    to: usize,
    tail: f64,
) -> f64 {
    let dt = cp.grid().dt();
    let mut acc = tail;
    for j in (from..to).rev() {
        acc += ell.eval(j, &path.prefix_unchecked(j), cp.actions[taken[j - from]].value) * dt;
    }
    acc
}

fn open_loop(node: usize, n: usize, actions: &[usize]) -> ControlPolicy {
    let mut full = vec![0; n];
    full[node..node + actions.len()].copy_from_slice(actions);
    ControlPolicy::OpenLoop(full)
}

/// Monte Carlo estimate of `J(t, x, policy)`.
#[allow(clippy::too_many_arguments)]
pub fn gain_estimate(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    policy: &ControlPolicy,
    n_paths: usize,
    seed: u64,
    kind: NoiseKind,
) -> Result<Estimate> {
    let grid = *cp.grid();
    let n = grid.n_steps;
    let factors = stepper_factors(&cp.model, &grid);
    let samples = par_map(n_paths, |i| -> Result<f64> {
        let key = NoiseStream::new(seed, i as u64, cp.model.dim_k, kind);
        let (path, taken) = simulate_controlled_from(cp, node, x, policy, &key, &factors)?;
        Ok(gain_onto(cp, ell, &path, &taken, node, n, xi.eval_path(n, &path)))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// `v(t, x)` over the declared policy class.
pub fn value_function(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    cfg: &SearchConfig,
) -> Result<ControlValue> {
    let grid = *cp.grid();
    grid.check_node(node)?;
    let n = grid.n_steps;
    if cfg.n_paths == 0 {
        return Err(invalid("n_paths", "must be positive"));
    }
    if node == n {
        return Ok(ControlValue {
            estimate: Estimate::exact(xi.eval(n, &x.prefix(n)?)),
            policy: PolicySnapshot::OpenLoop {
                start: n,
                actions: Vec::new(),
            },
            exhaustive: true,
            saturated: false,
            evaluated: 1,
        });
    }
    let seed = derive_seed(cfg.seed, VERIFY_TAG);
    let eval = |actions: &[usize]| {
        gain_estimate(cp, ell, xi, node, x, &open_loop(node, n, actions), cfg.n_paths, seed, cfg.noise)
    };
    let found = lattice_search(n - node, cp.actions.len(), cfg.exhaustive_cap, cfg.max_sweeps, &eval)?;
    let mut out = ControlValue {
        estimate: found.estimate,
        policy: PolicySnapshot::OpenLoop {
            start: node,
            actions: found.actions,
        },
        exhaustive: found.exhaustive,
        saturated: found.saturated,
        evaluated: found.evaluated,
    };
    if let Some(fb) = &cfg.feedback {
        let policy = feedback_policy(cp, ell, xi, node, x, fb, cfg)?;
        let e = gain_estimate(cp, ell, xi, node, x, &policy.to_policy(), cfg.n_paths, seed, cfg.noise)?;
        out.evaluated += 1;
        if e.mean > out.estimate.mean {
            out.estimate = e;
            out.policy = PolicySnapshot::Feedback(policy);
        }
    }
    Ok(out)
}

/// Regression dynamic programming from exploratory training paths: each
/// training state at node `j` is pushed one step under every action with the
/// path's own increment, and `Q_{j,a}` regresses `ℓ Δ + V̂_{j+1}`.
pub fn feedback_policy(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    fb: &FeedbackConfig,
    cfg: &SearchConfig,
) -> Result<FeedbackPolicy> {
    fb.features.validate(cp.model.dim_h)?;
    if fb.n_train_paths < 2 {
        return Err(invalid("n_train_paths", "need at least 2 training paths"));
    }
    let grid = *cp.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim = cp.model.dim_h;
    let dim_k = cp.model.dim_k;
    let n_actions = cp.actions.len();
    let nf = fb.features.len();
    let factors = stepper_factors(&cp.model, &grid);
    let seed = derive_seed(cfg.seed, TRAIN_TAG);
    let explore = move |i: usize, j: usize| (derive_seed(seed ^ i as u64, j as u64) % n_actions as u64) as usize;
    let train = par_map(fb.n_train_paths, |i| -> Result<(DiscretePath, Vec<f64>)> {
        let key = NoiseStream::new(seed, i as u64, dim_k, cfg.noise);
        let policy = ControlPolicy::feedback(move |j, _| explore(i, j));
        let (path, _) = simulate_controlled_from(cp, node, x, &policy, &key, &factors)?;
        let mut dw = Vec::new();
        key.fill(node, n - node, dt, &mut dw);
        Ok((path, dw))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut q: Vec<Vec<LinearFit>> = vec![Vec::new(); n - node];
    for j in (node..n).rev() {
        let next = if j + 1 < n {
            Some(FeedbackPolicy {
                features: fb.features.clone(),
                start: j + 1,
                q: vec![q[j + 1 - node].clone()],
            })
        } else {
            None
        };
        let rows = par_map(train.len(), |i| -> Result<(Vec<f64>, Vec<f64>)> {
            let (path, dw) = &train[i];
            let prefix = path.prefix_unchecked(j);
            let phi = fb.features.eval(&prefix);
            let w = &dw[(j - node) * dim_k..(j - node + 1) * dim_k];
            let mut values = path.values()[..(j + 1) * dim].to_vec();
            let mut incr = vec![0.0; dim];
            let mut b = vec![0.0; dim];
            let mut targets = Vec::with_capacity(n_actions);
            for action in &cp.actions {
                let a = action.value;
                advance(&grid, &factors, &mut values, j, w, &mut incr, &mut |jj, p, ww, inc| {
                    controlled_increment(cp, jj, p, a, ww, dt, &mut b, inc)
                })?;
                let moved = PathPrefix::new(grid, dim, &values)?;
                let cont = match &next {
                    Some(pol) => pol.value(j + 1, &moved),
                    None => xi.eval(n, &moved),
                };
                targets.push(ell.eval(j, &prefix, a) * dt + cont);
                values.truncate((j + 1) * dim);
            }
            Ok((phi, targets))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mut design = Vec::with_capacity(rows.len() * nf);
        for (phi, _) in &rows {
            design.extend_from_slice(phi);
        }
        let mut fits = Vec::with_capacity(n_actions);
        for a in 0..n_actions {
            let y: Vec<f64> = rows.iter().map(|(_, t)| t[a]).collect();
            fits.push(ridge_fit(&design, nf, &y, fb.ridge, j)?);
        }
        q[j - node] = fits;
    }
    Ok(FeedbackPolicy {
        features: fb.features.clone(),
        start: node,
        q,
    })
}

/// `E[Σ_{t ≤ t_j < τ} ℓ Δ + v̂(τ, X_{·∧τ})]` under the given actions on
/// `[t, τ)`, with `v̂` an inner [`value_function`] per outer path. Inner
/// seeds depend on the outer path index only.
#[allow(clippy::too_many_arguments)]
fn nested_rhs(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    tau: usize,
    actions: &[usize],
    cfg: &SearchConfig,
) -> Result<Estimate> {
    let grid = *cp.grid();
    let n = grid.n_steps;
    let factors = stepper_factors(&cp.model, &grid);
    let outer_seed = derive_seed(cfg.seed, VERIFY_TAG ^ 0x6f75_7465);
    let policy = open_loop(node, n, actions);
    let samples: Vec<f64> = (0..cfg.n_outer_paths)
        .map(|i| -> Result<f64> {
            let key = NoiseStream::new(outer_seed, i as u64, cp.model.dim_k, cfg.noise);
            let (path, taken) = simulate_controlled_from(cp, node, x, &policy, &key, &factors)?;
            let inner = SearchConfig {
                seed: derive_seed(cfg.seed, i as u64 + 1),
                ..cfg.clone()
            };
            let v = value_function(cp, ell, xi, tau, &path, &inner)?;
            Ok(gain_onto(cp, ell, &path, &taken, node, tau, v.estimate.mean))
        })
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&samples))
}

#[derive(Debug, Clone, Serialize)]
pub struct DppResult {
    pub lhs: ControlValue,
    pub rhs: Estimate,
    pub drift: Estimate,
    pub z: f64,
    pub saturated: bool,
    /// `None` when a search saturated.
    pub pass: Option<bool>,
}

/// `sup_a E[∫_t^τ ℓ + v(τ, X^{t,x,a})] - v(t, x)` with the same policy
/// class on both sides.
pub fn dpp_check(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    tau: usize,
    cfg: &SearchConfig,
) -> Result<DppResult> {
    let grid = *cp.grid();
    grid.check_node(tau)?;
    if tau <= node {
        return Err(invalid("tau", format!("node {tau} must be after t node {node}")));
    }
    let lhs = value_function(cp, ell, xi, node, x, cfg)?;
    let eval = |actions: &[usize]| nested_rhs(cp, ell, xi, node, x, tau, actions, cfg);
    let outer = lattice_search(tau - node, cp.actions.len(), cfg.exhaustive_cap, cfg.max_sweeps, &eval)?;
    let drift = Estimate {
        mean: outer.estimate.mean - lhs.estimate.mean,
        stderr: outer.estimate.stderr.hypot(lhs.estimate.stderr),
        n: outer.estimate.n,
    };
    let z = drift.z_against(0.0);
    let saturated = lhs.saturated || outer.saturated;
    Ok(DppResult {
        pass: (!saturated).then_some(z.abs() <= 3.0),
        lhs,
        rhs: outer.estimate,
        drift,
        z,
        saturated,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct HjbRow {
    pub t: f64,
    pub h: f64,
    /// Drift of `v(s, X^a) + ∫ ℓ` over `[t, t + h]` per constant action.
    pub drifts: Vec<Estimate>,
    pub best_action: usize,
    /// All per-action drifts `≤ z σ`.
    pub supersolution: bool,
    /// Best drift `≥ -z σ`.
    pub subsolution: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StructureReport {
    /// `max |⟨β, b̄⟩ - ⟨σ̄* β, b̄₀⟩|` over probes, actions and basis vectors `β`.
    pub max_discrepancy: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct HjbReport {
    pub threshold: f64,
    pub rows: Vec<HjbRow>,
    pub structure: Option<StructureReport>,
}

impl HjbReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.supersolution && r.subsolution)
            && self.structure.as_ref().is_none_or(|s| s.consistent)
    }
}

/// Viscosity property of `v`: per constant action the drift is nonpositive,
/// and the best constant action nearly closes the gap over `h` steps.
pub fn hjb_viscosity_check(
    cp: &ControlledSdeProblem,
    ell: &RunningCost,
    xi: &PathFunctional,
    probes: &[(usize, DiscretePath)],
    h: usize,
    cfg: &SearchConfig,
) -> Result<HjbReport> {
    let grid = *cp.grid();
    let n = grid.n_steps;
    let threshold = bonferroni_z(probes.len());
    let mut rows = Vec::with_capacity(probes.len());
    for (node, x) in probes {
        let node = *node;
        if node >= n {
            return Err(invalid("probe", "probes must sit at interior nodes"));
        }
        let tau = (node + h.max(1)).min(n);
        let v = value_function(cp, ell, xi, node, x, cfg)?;
        let mut drifts = Vec::with_capacity(cp.actions.len());
        for a in 0..cp.actions.len() {
            let rhs = nested_rhs(cp, ell, xi, node, x, tau, &vec![a; tau - node], cfg)?;
            drifts.push(Estimate {
                mean: rhs.mean - v.estimate.mean,
                stderr: rhs.stderr.hypot(v.estimate.stderr),
                n: rhs.n,
            });
        }
        let (best_action, _) = argmax(drifts.iter().map(|d| d.mean));
        let best = drifts[best_action];
        rows.push(HjbRow {
            t: grid.time(node),
            h: grid.time(tau) - grid.time(node),
            supersolution: drifts.iter().all(|d| d.z_against(0.0) <= threshold),
            subsolution: best.z_against(0.0) >= -threshold,
            drifts,
            best_action,
        });
    }
    let structure = cp.structure.as_ref().map(|sc| {
        let dim = cp.model.dim_h;
        let dim_k = cp.model.dim_k;
        let mut b = vec![0.0; dim];
        let mut b0 = vec![0.0; dim_k];
        let mut worst = 0.0f64;
        let mut scale = 1.0f64;
        for (node, x) in probes {
            let prefix = x.prefix_unchecked(*node);
            for action in &cp.actions {
                cp.drift.eval(*node, &prefix, action.value, &mut b);
                sc.b0.eval(*node, &prefix, action.value, &mut b0);
                let sigma = cp.diffusion.matrix(*node, &prefix, action.value);
                for (k, bk) in b.iter().enumerate() {
                    // ⟨σ̄* e_k, b̄₀⟩ = Σ_m σ̄_{k m} b̄₀_m
                    let via_b0: f64 = (0..dim_k).map(|m| sigma.get(k, m) * b0[m]).sum();
                    worst = worst.max((bk - via_b0).abs());
                    scale = scale.max(bk.abs());
                }
            }
        }
        StructureReport {
            max_discrepancy: worst,
            consistent: worst <= 1e-10 * scale,
        }
    });
    Ok(HjbReport {
        threshold,
        rows,
        structure,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MixedValue {
    pub value: f64,
    pub stop_at_root: bool,
    /// Best action at the root when continuing.
    pub root_action: Option<usize>,
}

/// `sup_{τ, a} E[φ(τ ∧ s, X^{t,x,a})]` by backward induction on the Bernoulli
/// tree: each node takes the larger of stopping and the best action's
/// expected continuation.
pub fn mixed_stop_control(
    phi: &dyn ValueFn,
    cp: &ControlledSdeProblem,
    node: usize,
    x: &DiscretePath,
    s: usize,
) -> Result<MixedValue> {
    let grid = *cp.grid();
    grid.check_node(node)?;
    grid.check_node(s)?;
    if s < node {
        return Err(invalid("s", format!("horizon node {s} precedes t node {node}")));
    }
    let steps = s - node;
    tree_guard(steps, cp.model.dim_k)?;
    let action_bits = (cp.actions.len() as f64).log2().ceil() as usize;
    if steps * (cp.model.dim_k + action_bits) > TREE_CAP_BITS + 4 {
        return Err(Error::TreeTooLarge {
            size: lattice_size(cp.actions.len() << cp.model.dim_k, steps).unwrap_or(u128::MAX),
            cap: 1u128 << (TREE_CAP_BITS + 4),
        });
    }
    let mut walker = MixedWalker {
        cp,
        phi,
        factors: stepper_factors(&cp.model, &grid),
        dt: grid.dt(),
        s,
        incr: vec![0.0; cp.model.dim_h],
        b: vec![0.0; cp.model.dim_h],
    };
    let mut values = x.values()[..(node + 1) * x.dim()].to_vec();
    let (value, stop, action) = walker.visit(&mut values, node)?;
    Ok(MixedValue {
        value,
        stop_at_root: stop,
        root_action: action,
    })
}

struct MixedWalker<'a> {
    cp: &'a ControlledSdeProblem,
    phi: &'a dyn ValueFn,
    factors: Vec<f64>,
    dt: f64,
    s: usize,
    incr: Vec<f64>,
    b: Vec<f64>,
}

impl MixedWalker<'_> {
    fn visit(&mut self, values: &mut Vec<f64>, j: usize) -> Result<(f64, bool, Option<usize>)> {
        let grid = *self.cp.grid();
        let dim = self.factors.len();
        let dim_k = self.cp.model.dim_k;
        let stop_value = self.phi.value(j, &PathPrefix::new(grid, dim, values)?);
        if j == self.s {
            return Ok((stop_value, true, None));
        }
        let n_children = 1usize << dim_k;
        let weight = 1.0 / n_children as f64;
        let mut dw = vec![0.0; dim_k];
        let mut best = (f64::NEG_INFINITY, 0);
        for (ai, action) in self.cp.actions.iter().enumerate() {
            let a = action.value;
            let mut cont = 0.0;
            for c in 0..n_children {
                branch_increments(c, dim_k, self.dt, &mut dw);
                let (cp, dt) = (self.cp, self.dt);
                let b = &mut self.b;
                advance(&grid, &self.factors, values, j, &dw, &mut self.incr, &mut |jj, p, w, inc| {
                    controlled_increment(cp, jj, p, a, w, dt, b, inc)
                })?;
                cont += weight * self.visit(values, j + 1)?.0;
                values.truncate((j + 1) * dim);
            }
            if cont > best.0 {
                best = (cont, ai);
            }
        }
        if stop_value >= best.0 {
            Ok((stop_value, true, None))
        } else {
            Ok((best.0, false, Some(best.1)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{ControlledDiffusion, ControlledDrift, Diffusion, Drift};
    use crate::path::Grid;
    use crate::sde::Action;
    use crate::spectral::SpectralModel;

    fn bang_bang(n: usize) -> ControlledSdeProblem {
        let model = SpectralModel::new(1, vec![0.0], 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = Grid::new(n, 1.0).unwrap();
        ControlledSdeProblem::new(
            model,
            ControlledDrift::action_shift(Drift::zero(), 0),
            ControlledDiffusion::Uncontrolled(Diffusion::zero(1, 1)),
            vec![Action::new("down", -1.0), Action::new("up", 1.0)],
            DiscretePath::constant(grid, &[1.0]),
            0,
        )
        .unwrap()
    }

    fn cfg() -> SearchConfig {
        SearchConfig {
            n_paths: 4,
            n_outer_paths: 4,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn bang_bang_value_and_dpp() {
        let cp = bang_bang(4);
        let xi = PathFunctional::endpoint(vec![1.0]);
        let v = value_function(&cp, &RunningCost::zero(), &xi, 0, &cp.initial, &cfg()).unwrap();
        assert_eq!(v.estimate.mean, 2.0);
        assert_eq!(v.estimate.stderr, 0.0);
        match &v.policy {
            PolicySnapshot::OpenLoop { actions, .. } => assert_eq!(actions, &vec![1; 4]),
            _ => panic!("expected open loop"),
        }
        let d = dpp_check(&cp, &RunningCost::zero(), &xi, 0, &cp.initial, 2, &cfg()).unwrap();
        assert_eq!(d.drift.mean, 0.0);
        assert_eq!(d.pass, Some(true));
    }

    #[test]
    fn coordinate_ascent_matches_exhaustive() {
        let cp = bang_bang(8);
        let xi = PathFunctional::endpoint(vec![1.0]);
        let small = SearchConfig {
            exhaustive_cap: 1,
            ..cfg()
        };
        let v = value_function(&cp, &RunningCost::zero(), &xi, 0, &cp.initial, &small).unwrap();
        assert!(!v.exhaustive);
        assert!(!v.saturated);
        assert_eq!(v.estimate.mean, 2.0);
    }

    #[test]
    fn hjb_drifts_in_linear_example() {
        let cp = bang_bang(4);
        let xi = PathFunctional::endpoint(vec![1.0]);
        let r = hjb_viscosity_check(&cp, &RunningCost::zero(), &xi, &[(1, cp.initial.clone())], 1, &cfg()).unwrap();
        let row = &r.rows[0];
        assert_eq!(row.drifts[1].mean, 0.0);
        assert_eq!(row.drifts[0].mean / row.h, -2.0);
        assert!(row.supersolution && row.subsolution);
    }

    #[test]
    fn mixed_picks_up_and_waits() {
        let cp = bang_bang(4);
        let m = mixed_stop_control(&PathFunctional::endpoint(vec![1.0]), &cp, 0, &cp.initial, 4).unwrap();
        assert_eq!(m.value, 2.0);
        assert_eq!(m.root_action, Some(1));
    }

    #[test]
    fn structure_condition_consistency() {
        let model = SpectralModel::new(1, vec![-1.0], 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = Grid::new(2, 1.0).unwrap();
        let sigma = 0.5;
        let cp = ControlledSdeProblem::new(
            model,
            ControlledDrift::new(move |_, _, a, out| out[0] = sigma * a),
            ControlledDiffusion::Uncontrolled(Diffusion::diagonal(1, 1, vec![sigma])),
            vec![Action::new("a", 1.0)],
            DiscretePath::constant(grid, &[0.0]),
            0,
        )
        .unwrap()
        .with_structure(ControlledDrift::new(|_, _, a, out| out[0] = a));
        let r = hjb_viscosity_check(&cp, &RunningCost::zero(), &PathFunctional::constant(0.0), &[(0, cp.initial.clone())], 1, &cfg()).unwrap();
        assert!(r.structure.unwrap().consistent);
    }
}
