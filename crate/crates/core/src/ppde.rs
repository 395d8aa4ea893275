//! Solvers for the semilinear path-dependent PDE
//!
//! ```text
//! L u(t,x) + F(t, x, u(t,x)) = 0,   u(T, x) = ξ(x),
//! ```
//!
//! through its mild form `u(t,x) = E[ξ(X^{t,x}) + ∫_t^T F(s, X^{t,x}, u(s, X^{t,x})) ds]`.
//!
//! Time integrals are discretized with the right-endpoint rule
//! `∫_{t_j}^{t_m} g ds ≈ Σ_{l=j+1}^{m} g(t_l) Δ` everywhere in this module
//! (solver, residuals, BSDE). The discrete Picard fixed point and the explicit
//! backward BSDE recursion then solve the same discrete equation.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::{Nonlinearity, PathFunctional};
use crate::error::{invalid, Error, Result};
use crate::noise::{derive_seed, NoiseKind, NoiseSource};
use crate::parallel::par_map;
use crate::path::{DiscretePath, PathPrefix};
use crate::regression::{ridge_fit, FeatureMap, LinearFit, DEFAULT_RIDGE};
use crate::sde::{simulate_mild_from, stepper_factors, SdeProblem};
use crate::stats::Estimate;

pub(crate) const TRAIN_TAG: u64 = 0x7261_696e;
pub(crate) const VERIFY_TAG: u64 = 0x7665_7269;

/// Relative floor on drift standard errors: a zero-variance drift is only
/// known to within accumulated rounding.
pub const ROUNDING_FLOOR: f64 = 1e-12;

/// A non-anticipative real functional on the path space, `u: Λ -> R`.
pub trait ValueFn: Send + Sync {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64;

    /// `u(t_j, path_{·∧t_j})` for `j = from..=n`.
    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        (from..=path.grid().n_steps)
            .map(|j| self.value(j, &path.prefix_unchecked(j)))
            .collect()
    }
}

impl ValueFn for PathFunctional {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        self.eval(node, x)
    }
}

impl<V: ValueFn + ?Sized> ValueFn for Arc<V> {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        (**self).value(node, x)
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        (**self).along(path, from)
    }
}

impl<V: ValueFn + ?Sized> ValueFn for &V {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        (**self).value(node, x)
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        (**self).along(path, from)
    }
}

/// `u(t,x) + c (T - t)`.
#[derive(Clone)]
pub struct TimeShifted {
    pub inner: Arc<dyn ValueFn>,
    pub c: f64,
}

impl TimeShifted {
    pub fn new(inner: Arc<dyn ValueFn>, c: f64) -> Self {
        Self { inner, c }
    }
}

impl ValueFn for TimeShifted {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        self.inner.value(node, x) + self.c * (x.grid().horizon - x.time())
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        let g = path.grid();
        self.inner
            .along(path, from)
            .into_iter()
            .enumerate()
            .map(|(i, v)| v + self.c * (g.horizon - g.time(from + i)))
            .collect()
    }
}

/// `u + δ` on nodes `from_node..n` (terminal node untouched).
#[derive(Clone)]
pub struct TailShifted {
    pub inner: Arc<dyn ValueFn>,
    pub from_node: usize,
    pub delta: f64,
}

impl ValueFn for TailShifted {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        let v = self.inner.value(node, x);
        if node >= self.from_node && node < x.grid().n_steps {
            v + self.delta
        } else {
            v
        }
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        let n = path.grid().n_steps;
        self.inner
            .along(path, from)
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let j = from + i;
                if j >= self.from_node && j < n {
                    v + self.delta
                } else {
                    v
                }
            })
            .collect()
    }
}

/// `-u`.
#[derive(Clone)]
pub struct Negated(pub Arc<dyn ValueFn>);

impl ValueFn for Negated {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        -self.0.value(node, x)
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        self.0.along(path, from).into_iter().map(|v| -v).collect()
    }
}

/// Regression representation of a solution: one linear fit per grid node
/// over a fixed feature map of the stopped path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunctional {
    pub features: FeatureMap,
    pub n_steps: usize,
    pub horizon: f64,
    /// `None` before the first fitted node.
    pub fits: Vec<Option<LinearFit>>,
    /// Exact terminal condition, used at the last node when present.
    #[serde(skip)]
    pub terminal: Option<PathFunctional>,
}

impl ValueFunctional {
    pub fn fit_at(&self, node: usize) -> Option<&LinearFit> {
        self.fits.get(node).and_then(|f| f.as_ref())
    }

    /// Reattach the terminal condition after loading from JSON.
    pub fn with_terminal(mut self, xi: PathFunctional) -> Self {
        self.terminal = Some(xi);
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("value functional serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))
    }
}

impl ValueFn for ValueFunctional {
    /// NaN at nodes without a fit.
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        if node == self.n_steps {
            if let Some(xi) = &self.terminal {
                return xi.eval(node, x);
            }
        }
        match self.fit_at(node) {
            Some(fit) => fit.predict(&self.features.eval(x)),
            None => f64::NAN,
        }
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        let nf = self.features.len();
        let traj = self.features.trajectory(path, from);
        let n = self.n_steps;
        (from..=n)
            .map(|j| {
                if j == n {
                    if let Some(xi) = &self.terminal {
                        return xi.eval_path(j, path);
                    }
                }
                match self.fit_at(j) {
                    Some(fit) => fit.predict(&traj[(j - from) * nf..(j - from + 1) * nf]),
                    None => f64::NAN,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Fraction of the contraction bound `1 / (L̂ (1 + M))` used as window length.
    pub window_safety: f64,
    pub tol: f64,
    pub max_picard_iters: usize,
    pub n_train_paths: usize,
    pub features: FeatureMap,
    pub ridge: f64,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseKind,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            window_safety: 0.5,
            tol: 1e-10,
            max_picard_iters: 100,
            n_train_paths: 4000,
            features: FeatureMap::constant_only(),
            ridge: DEFAULT_RIDGE,
            seed: 0,
            noise: NoiseKind::Gaussian,
        }
    }
}

/// Monte Carlo settings for verification passes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseKind,
}

impl McConfig {
    pub fn new(n_paths: usize, seed: u64) -> Self {
        Self {
            n_paths,
            seed,
            noise: NoiseKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    /// `(end - start) Δ`.
    pub length: f64,
    /// `length · L̂ · (1 + M)`.
    pub contraction_bound: f64,
    /// Sup change over the training data after each iteration.
    pub changes: Vec<f64>,
    /// Successive change ratios (only where the previous change is nonzero).
    pub ratios: Vec<f64>,
    pub iterations: usize,
}

impl WindowReport {
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PicardSolution {
    pub value: ValueFunctional,
    pub windows: Vec<WindowReport>,
    /// Estimate of `u(t, z)` at the initial datum.
    pub initial_value: Estimate,
    /// Upper bound on window length, `safety / (L̂ (1 + M))`.
    pub epsilon: f64,
}

/// Window boundaries (node indices) from `start` to `n`, each at most
/// `max_steps` long, laid out backward from the horizon.
pub fn window_partition(start: usize, n: usize, max_steps: usize) -> Vec<(usize, usize)> {
    let max_steps = max_steps.max(1);
    let mut windows = Vec::new();
    let mut end = n;
    while end > start {
        let begin = end.saturating_sub(max_steps).max(start);
        windows.push((begin, end));
        end = begin;
    }
    windows
}

struct Training {
    paths: Vec<DiscretePath>,
    /// Features per path, nodes `start..=n`, node-major.
    features: Vec<Vec<f64>>,
}

fn simulate_training(problem: &SdeProblem, n_paths: usize, seed: u64, kind: NoiseKind, features: &FeatureMap) -> Result<Training> {
    let grid = *problem.grid();
    let factors = stepper_factors(&problem.model, &grid);
    let start = problem.start;
    let out = par_map(n_paths, |i| -> Result<(DiscretePath, Vec<f64>)> {
        let key = problem.noise(seed, i as u64, kind);
        let x = simulate_mild_from(problem, start, &problem.initial, &key, &factors)?;
        let f = features.trajectory(&x, start);
        Ok((x, f))
    });
    let mut paths = Vec::with_capacity(n_paths);
    let mut feats = Vec::with_capacity(n_paths);
    for r in out {
        let (x, f) = r?;
        paths.push(x);
        feats.push(f);
    }
    Ok(Training {
        paths,
        features: feats,
    })
}

fn design_at(training: &Training, node: usize, start: usize, nf: usize) -> Vec<f64> {
    let off = (node - start) * nf;
    let mut d = Vec::with_capacity(training.paths.len() * nf);
    for f in &training.features {
        d.extend_from_slice(&f[off..off + nf]);
    }
    d
}

/// Solve the PPDE by backward windows of Picard iteration on the mild map
/// `Γ(u)(t,x) = E[ζ(X) + ∫_t^b F(s, X, u(s, X)) ds]`, each conditional
/// expectation computed by regression on a single training ensemble.
pub fn picard_solve(
    problem: &SdeProblem,
    f: &Nonlinearity,
    xi: &PathFunctional,
    cfg: &SolverConfig,
) -> Result<PicardSolution> {
    if cfg.n_train_paths < 2 {
        return Err(invalid("n_train_paths", "need at least 2 training paths"));
    }
    if !(cfg.window_safety > 0.0 && cfg.window_safety < 1.0) {
        return Err(invalid("window_safety", "must lie in (0, 1)"));
    }
    cfg.features.validate(problem.model.dim_h)?;
    let grid = *problem.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let start = problem.start;
    let nf = cfg.features.len();
    let lhat = f.constants.lipschitz;
    let m = problem.model.lip_b;
    let epsilon = if lhat > 0.0 {
        cfg.window_safety / (lhat * (1.0 + m))
    } else {
        f64::INFINITY
    };
    let max_steps = if epsilon.is_finite() {
        ((epsilon / dt) * (1.0 + 1e-12)).floor() as usize
    } else {
        n
    };
    if max_steps == 0 {
        return Err(invalid(
            "n_steps",
            format!("time step {dt} exceeds the contraction window {epsilon}; refine the grid"),
        ));
    }

    let training = simulate_training(problem, cfg.n_train_paths, derive_seed(cfg.seed, TRAIN_TAG), cfg.noise, &cfg.features)?;
    let n_paths = training.paths.len();
    let width = n - start + 1;
    // u along each training path, nodes start..=n
    let mut u = vec![vec![0.0; width]; n_paths];
    for (i, x) in training.paths.iter().enumerate() {
        u[i][n - start] = xi.eval_path(n, x);
    }
    let mut fits: Vec<Option<LinearFit>> = vec![None; n + 1];
    let terminal_design = design_at(&training, n, start, nf);
    let terminal_targets: Vec<f64> = u.iter().map(|r| r[n - start]).collect();
    fits[n] = Some(ridge_fit(&terminal_design, nf, &terminal_targets, cfg.ridge, n)?);

    let designs: Vec<Vec<f64>> = (start..=n).map(|j| design_at(&training, j, start, nf)).collect();
    let mut windows = Vec::new();
    let mut initial_value = Estimate::exact(terminal_targets.iter().sum::<f64>() / n_paths as f64);
    if start == n {
        initial_value = Estimate::from_samples(&terminal_targets);
    }

    for (a, b) in window_partition(start, n, max_steps) {
        let len = b - a;
        let mut report = WindowReport {
            start: a,
            end: b,
            length: len as f64 * dt,
            contraction_bound: len as f64 * dt * lhat * (1.0 + m),
            changes: Vec::new(),
            ratios: Vec::new(),
            iterations: 0,
        };
        // Current iterate on nodes a..b (exclusive of b), starting from 0.
        for row in u.iter_mut() {
            for v in &mut row[a - start..b - start] {
                *v = 0.0;
            }
        }
        let mut window_fits: Vec<LinearFit> = vec![LinearFit::constant(0.0, nf); len];
        let mut last_targets_at_a: Vec<f64> = Vec::new();
        let mut rising = 0;
        loop {
            if report.iterations >= cfg.max_picard_iters {
                return Err(Error::NoConvergence {
                    start: a,
                    end: b,
                    iters: report.iterations,
                    last_change: report.changes.last().copied().unwrap_or(f64::NAN),
                });
            }
            report.iterations += 1;
            // targets_j = ζ + Σ_{l=j+1}^{b} F(t_l, X, u_l) Δ, accumulated backward.
            let targets: Vec<Vec<f64>> = par_map(n_paths, |i| {
                let x = &training.paths[i];
                let row = &u[i];
                let mut acc = row[b - start];
                let mut t = vec![0.0; len];
                for j in (a..b).rev() {
                    let l = j + 1;
                    acc += f.eval(l, &x.prefix_unchecked(l), row[l - start]) * dt;
                    t[j - a] = acc;
                }
                t
            });
            let mut new_fits = Vec::with_capacity(len);
            for j in a..b {
                let y: Vec<f64> = targets.iter().map(|t| t[j - a]).collect();
                new_fits.push(ridge_fit(&designs[j - start], nf, &y, cfg.ridge, j)?);
                if j == a {
                    last_targets_at_a = y;
                }
            }
            let mut change = 0.0f64;
            for (i, row) in u.iter_mut().enumerate() {
                let feats = &training.features[i];
                for j in a..b {
                    let v = new_fits[j - a].predict(&feats[(j - start) * nf..(j - start + 1) * nf]);
                    change = change.max((v - row[j - start]).abs());
                    row[j - start] = v;
                }
            }
            if !change.is_finite() {
                return Err(Error::NonFinite {
                    what: "Picard iterate",
                    step: a,
                });
            }
            if let Some(prev) = report.changes.last().copied() {
                if prev > 0.0 {
                    let r = change / prev;
                    report.ratios.push(r);
                    rising = if r >= 1.0 { rising + 1 } else { 0 };
                    if rising >= 3 {
                        return Err(Error::NotContracting {
                            start: a,
                            end: b,
                            ratios: report.ratios.clone(),
                        });
                    }
                }
            }
            report.changes.push(change);
            window_fits = new_fits;
            if change < cfg.tol {
                break;
            }
        }
        for (j, fit) in (a..b).zip(window_fits) {
            fits[j] = Some(fit);
        }
        if a == start {
            initial_value = Estimate::from_samples(&last_targets_at_a);
            // The regression value at a deterministic start is the sample mean.
            if let Some(fit) = &fits[start] {
                initial_value.mean = fit.predict(&designs[0][..nf]);
            }
        }
        windows.push(report);
    }
    windows.reverse();

    Ok(PicardSolution {
        value: ValueFunctional {
            features: cfg.features.clone(),
            n_steps: n,
            horizon: grid.horizon,
            fits,
            terminal: Some(xi.clone()),
        },
        windows,
        initial_value,
        epsilon,
    })
}

/// One row of a residual table.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualRow {
    pub probe: usize,
    pub t: f64,
    pub s: f64,
    pub estimate: Estimate,
    pub z: f64,
}

/// Monte Carlo estimates of
/// `E[u(s, X^{t,x}) + ∫_t^s F(r, X^{t,x}, u(r, X^{t,x})) dr] - u(t, x)`
/// for every `s` in `s_nodes` (nodes `≥ node`).
pub fn drift_estimates(
    u: &dyn ValueFn,
    problem: &SdeProblem,
    f: &Nonlinearity,
    node: usize,
    x: &DiscretePath,
    s_nodes: &[usize],
    n_paths: usize,
    seed: u64,
    kind: NoiseKind,
) -> Result<Vec<Estimate>> {
    let grid = *problem.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    grid.check_node(node)?;
    if let Some(s) = s_nodes.iter().find(|s| **s < node || **s > n) {
        return Err(invalid("s", format!("node {s} is not in [{node}, {n}]")));
    }
    let u0 = u.value(node, &x.prefix(node)?);
    let factors = stepper_factors(&problem.model, &grid);
    let max_s = s_nodes.iter().copied().max().unwrap_or(node);
    let samples = par_map(n_paths, |i| -> Result<Vec<f64>> {
        let key = problem.noise(seed, i as u64, kind);
        let path = simulate_mild_from(problem, node, x, &key, &factors)?;
        let vals = u.along(&path, node);
        // running[k] = Σ_{l=node+1}^{node+k} F(t_l, X, u_l) Δ
        let mut running = vec![0.0; max_s - node + 1];
        for l in node + 1..=max_s {
            running[l - node] =
                running[l - node - 1] + f.eval(l, &path.prefix_unchecked(l), vals[l - node]) * dt;
        }
        Ok(s_nodes
            .iter()
            .map(|&s| if s == node { 0.0 } else { vals[s - node] + running[s - node] - u0 })
            .collect())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((0..s_nodes.len())
        .map(|k| {
            if s_nodes[k] == node {
                Estimate::exact(0.0)
            } else {
                let xs: Vec<f64> = samples.iter().map(|r| r[k]).collect();
                let scale = xs.iter().fold(u0.abs(), |m, x| m.max((x + u0).abs()));
                let mut e = Estimate::from_samples(&xs);
                e.stderr = e.stderr.max(ROUNDING_FLOOR * scale);
                e
            }
        })
        .collect())
}

/// Residual of the mild identity at every test point and every `s`.
pub fn mild_residual(
    u: &dyn ValueFn,
    problem: &SdeProblem,
    f: &Nonlinearity,
    test_points: &[(usize, DiscretePath)],
    s_choices: &[usize],
    mc: &McConfig,
) -> Result<Vec<ResidualRow>> {
    let grid = *problem.grid();
    let mut rows = Vec::new();
    for (p, (node, x)) in test_points.iter().enumerate() {
        let s_nodes: Vec<usize> = s_choices.iter().copied().filter(|s| s >= node).collect();
        let seed = derive_seed(derive_seed(mc.seed, VERIFY_TAG), p as u64);
        let est = drift_estimates(u, problem, f, *node, x, &s_nodes, mc.n_paths, seed, mc.noise)?;
        for (s, e) in s_nodes.iter().zip(est) {
            rows.push(ResidualRow {
                probe: p,
                t: grid.time(*node),
                s: grid.time(*s),
                z: e.z_against(0.0),
                estimate: e,
            });
        }
    }
    Ok(rows)
}

/// Regression state of the backward scheme.
#[derive(Debug, Clone, Serialize)]
pub struct BsdeState {
    pub features: FeatureMap,
    pub start: usize,
    /// `Y` fits at nodes `start..n`; `Y_n = ξ` is exact.
    pub y_fits: Vec<LinearFit>,
    /// Per node, one fit per noise mode.
    pub z_fits: Vec<Vec<LinearFit>>,
    /// `Y_n` on the training paths (equal to `ξ` by construction).
    pub terminal_values: Vec<f64>,
}

impl BsdeState {
    pub fn y(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        self.y_fits[node - self.start].predict(&self.features.eval(x))
    }

    pub fn z(&self, node: usize, x: &PathPrefix<'_>) -> Vec<f64> {
        let phi = self.features.eval(x);
        self.z_fits[node - self.start].iter().map(|f| f.predict(&phi)).collect()
    }
}

/// Backward Euler for the BSDE
/// `Y_j = E_j[Y_{j+1} + F(t_{j+1}, X, Y_{j+1}) Δ]`, `Z_j = E_j[Y_{j+1} ΔW_j] / Δ`,
/// started from `Y_n = ξ(X)` on paths of `X^{t,x}`.
pub fn bsde_solve(
    problem: &SdeProblem,
    f: &Nonlinearity,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    cfg: &SolverConfig,
) -> Result<(Estimate, BsdeState)> {
    cfg.features.validate(problem.model.dim_h)?;
    if cfg.n_train_paths < 2 {
        return Err(invalid("n_train_paths", "need at least 2 training paths"));
    }
    let p = problem.restarted(node, x)?;
    let grid = *p.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let nf = cfg.features.len();
    let dim_k = p.model.dim_k;
    let seed = derive_seed(cfg.seed, TRAIN_TAG);
    let training = simulate_training(&p, cfg.n_train_paths, seed, cfg.noise, &cfg.features)?;
    let n_paths = training.paths.len();
    let increments: Vec<Vec<f64>> = par_map(n_paths, |i| {
        let mut w = Vec::new();
        p.noise(seed, i as u64, cfg.noise).fill(node, n - node, dt, &mut w);
        w
    });
    let mut y: Vec<f64> = training.paths.iter().map(|x| xi.eval_path(n, x)).collect();
    let terminal_values = y.clone();
    let mut y_fits = vec![LinearFit::constant(0.0, nf); n - node];
    let mut z_fits = vec![Vec::new(); n - node];
    let mut last_targets = y.clone();
    for j in (node..n).rev() {
        let design = design_at(&training, j, node, nf);
        let targets: Vec<f64> = training
            .paths
            .iter()
            .zip(&y)
            .map(|(path, yn)| yn + f.eval(j + 1, &path.prefix_unchecked(j + 1), *yn) * dt)
            .collect();
        let fit = ridge_fit(&design, nf, &targets, cfg.ridge, j)?;
        let mut zf = Vec::with_capacity(dim_k);
        for k in 0..dim_k {
            let zt: Vec<f64> = y
                .iter()
                .zip(&increments)
                .map(|(yn, w)| yn * w[(j - node) * dim_k + k] / dt)
                .collect();
            zf.push(ridge_fit(&design, nf, &zt, cfg.ridge, j)?);
        }
        for (i, yi) in y.iter_mut().enumerate() {
            let feats = &training.features[i];
            *yi = fit.predict(&feats[(j - node) * nf..(j - node + 1) * nf]);
        }
        y_fits[j - node] = fit;
        z_fits[j - node] = zf;
        last_targets = targets;
    }
    let mut y0 = Estimate::from_samples(&last_targets);
    if n > node {
        y0.mean = y[0];
    }
    Ok((
        y0,
        BsdeState {
            features: cfg.features.clone(),
            start: node,
            y_fits,
            z_fits,
            terminal_values,
        },
    ))
}

/// `E[ξ(X^{t,x}) + ∫_t^T g(s, X^{t,x}) ds]` for a source term `g` that does
/// not depend on the solution.
pub fn feynman_kac_linear(
    problem: &SdeProblem,
    g: &PathFunctional,
    xi: &PathFunctional,
    node: usize,
    x: &DiscretePath,
    mc: &McConfig,
) -> Result<Estimate> {
    let grid = *problem.grid();
    grid.check_node(node)?;
    let n = grid.n_steps;
    let dt = grid.dt();
    let factors = stepper_factors(&problem.model, &grid);
    let seed = derive_seed(mc.seed, VERIFY_TAG);
    let samples = par_map(mc.n_paths, |i| -> Result<f64> {
        let key = problem.noise(seed, i as u64, mc.noise);
        let path = simulate_mild_from(problem, node, x, &key, &factors)?;
        let mut acc = 0.0;
        for l in node + 1..=n {
            acc += g.eval(l, &path.prefix_unchecked(l)) * dt;
        }
        Ok(xi.eval_path(n, &path) + acc)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&samples))
}
