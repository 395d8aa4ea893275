//! Mild-solution simulation of path-dependent SDEs.
//!
//! The scheme is exponential Euler in the eigenbasis,
//!
//! ```text
//! X_{j+1} = e^{ΔA} ( X_j + b(t_j, X_{·∧t_j}) Δ + σ(t_j, X_{·∧t_j}) ΔW_j ),
//! ```
//!
//! with the semigroup applied exactly. A step only reads the current stopped
//! path and the keyed increment `ΔW_j`, so restarting from `X_{·∧s}` with
//! the same keys reproduces the original tail bit for bit.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::{ControlledDiffusion, ControlledDrift, Diffusion, Drift};
use crate::error::{invalid, Error, Result};
use crate::noise::{derive_seed, NoiseKind, NoiseSource, NoiseStream};
use crate::parallel::par_map;
use crate::path::{sup_norm, DiscretePath, Grid, PathPrefix};
use crate::spectral::{norm, SpectralModel};
use crate::stats::Estimate;

/// Uncontrolled path-dependent SDE with initial datum `(t, z)`.
#[derive(Debug, Clone)]
pub struct SdeProblem {
    pub model: SpectralModel,
    pub drift: Drift,
    pub diffusion: Diffusion,
    /// Initial path; only nodes `0..=start` are read.
    pub initial: DiscretePath,
    pub start: usize,
}

impl SdeProblem {
    pub fn new(
        model: SpectralModel,
        drift: Drift,
        diffusion: Diffusion,
        initial: DiscretePath,
        start: usize,
    ) -> Result<Self> {
        check_setup(&model, &initial, start)?;
        Ok(Self {
            model,
            drift,
            diffusion,
            initial,
            start,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.initial.grid()
    }

    /// Same coefficients, new initial datum `(node, x)`.
    pub fn restarted(&self, node: usize, x: &DiscretePath) -> Result<Self> {
        Self::new(self.model.clone(), self.drift.clone(), self.diffusion.clone(), x.clone(), node)
    }

    pub fn noise(&self, seed: u64, path_index: u64, kind: NoiseKind) -> NoiseStream {
        NoiseStream::new(seed, path_index, self.model.dim_k, kind)
    }
}

fn check_setup(model: &SpectralModel, initial: &DiscretePath, start: usize) -> Result<()> {
    model.validate()?;
    if initial.dim() != model.dim_h {
        return Err(Error::DimensionMismatch {
            expected: model.dim_h,
            got: initial.dim(),
        });
    }
    if (initial.grid().horizon - model.horizon).abs() > 1e-12 * model.horizon {
        return Err(invalid("horizon", "grid horizon differs from the model horizon"));
    }
    initial.grid().check_node(start)
}

/// Runs the exponential-Euler recursion from node `start` to the horizon.
///
/// `values` holds nodes `0..=start`; `step` receives the stopped path at
/// `t_j` and `ΔW_j` and writes `b Δ + σ ΔW` into its last argument (zeroed).
pub(crate) fn evolve<S>(
    grid: &Grid,
    factors: &[f64],
    values: &mut Vec<f64>,
    start: usize,
    noise: &[f64],
    dim_k: usize,
    mut step: S,
) -> Result<()>
where
    S: FnMut(usize, &PathPrefix<'_>, &[f64], &mut [f64]),
{
    let dim = factors.len();
    let n = grid.n_steps;
    values.truncate((start + 1) * dim);
    values.reserve((n - start) * dim);
    let mut incr = vec![0.0; dim];
    for j in start..n {
        let dw = &noise[(j - start) * dim_k..(j - start + 1) * dim_k];
        advance(grid, factors, values, j, dw, &mut incr, &mut step)?;
    }
    Ok(())
}

/// Appends node `j + 1` to `values` (which holds nodes `0..=j`).
pub(crate) fn advance<S>(
    grid: &Grid,
    factors: &[f64],
    values: &mut Vec<f64>,
    j: usize,
    dw: &[f64],
    incr: &mut [f64],
    step: &mut S,
) -> Result<()>
where
    S: FnMut(usize, &PathPrefix<'_>, &[f64], &mut [f64]),
{
    let dim = factors.len();
    incr.fill(0.0);
    {
        let prefix = PathPrefix::new(*grid, dim, &values[..(j + 1) * dim])?;
        step(j, &prefix, dw, incr);
    }
    if incr.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "drift/diffusion increment",
            step: j,
        });
    }
    let base = j * dim;
    for k in 0..dim {
        let next = factors[k] * (values[base + k] + incr[k]);
        values.push(next);
    }
    Ok(())
}

/// `b Δ + σ ΔW` for the uncontrolled coefficients.
pub(crate) fn mild_increment(problem: &SdeProblem, j: usize, prefix: &PathPrefix<'_>, dw: &[f64], dt: f64, b: &mut [f64], incr: &mut [f64]) {
    problem.drift.eval(j, prefix, b);
    for (i, bv) in incr.iter_mut().zip(b.iter()) {
        *i = bv * dt;
    }
    problem.diffusion.apply_add(j, prefix, dw, incr);
}

/// `b̄(a) Δ + σ̄(a) ΔW` for a controlled problem.
#[allow(clippy::too_many_arguments)]
pub(crate) fn controlled_increment(
    problem: &ControlledSdeProblem,
    j: usize,
    prefix: &PathPrefix<'_>,
    a: f64,
    dw: &[f64],
    dt: f64,
    b: &mut [f64],
    incr: &mut [f64],
) {
    problem.drift.eval(j, prefix, a, b);
    for (i, bv) in incr.iter_mut().zip(b.iter()) {
        *i = bv * dt;
    }
    problem.diffusion.apply_add(j, prefix, a, dw, incr);
}

fn initial_values(x: &DiscretePath, start: usize) -> Vec<f64> {
    x.values()[..(start + 1) * x.dim()].to_vec()
}

/// One mild path `X^{t,z}` driven by `noise`.
pub fn simulate_mild(problem: &SdeProblem, noise: &dyn NoiseSource) -> Result<DiscretePath> {
    let grid = *problem.grid();
    simulate_mild_from(problem, problem.start, &problem.initial, noise, &stepper_factors(&problem.model, &grid))
}

pub(crate) fn stepper_factors(model: &SpectralModel, grid: &Grid) -> Vec<f64> {
    model
        .semigroup_factors(grid.dt())
        .expect("grid step is positive")
}

/// `X^{node, x}` for an arbitrary stopped datum; shares the recursion with
/// [`simulate_mild`].
pub(crate) fn simulate_mild_from(
    problem: &SdeProblem,
    node: usize,
    x: &DiscretePath,
    noise: &dyn NoiseSource,
    factors: &[f64],
) -> Result<DiscretePath> {
    let grid = *x.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim_k = noise.dim_k();
    let mut dw = Vec::new();
    noise.fill(node, n - node, dt, &mut dw);
    let mut values = initial_values(x, node);
    let mut b = vec![0.0; problem.model.dim_h];
    evolve(&grid, factors, &mut values, node, &dw, dim_k, |j, prefix, w, incr| {
        mild_increment(problem, j, prefix, w, dt, &mut b, incr)
    })?;
    DiscretePath::from_values(grid, problem.model.dim_h, values)
}

/// An element of the finite action set `U`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub label: String,
    pub value: f64,
}

impl Action {
    pub fn new(label: impl Into<String>, value: f64) -> Self {
        Self {
            label: label.into(),
            value,
        }
    }
}

type FeedbackFn = dyn Fn(usize, &PathPrefix<'_>) -> usize + Send + Sync;

/// Grid-predictable control: the action on `[t_j, t_{j+1})` is chosen from
/// the path stopped at `t_j`, i.e. from noise up to step `j - 1`.
#[derive(Clone)]
pub enum ControlPolicy {
    /// Action index per step `j = 0..n_steps` (steps before the start are ignored).
    OpenLoop(Vec<usize>),
    Feedback(Arc<FeedbackFn>),
}

impl std::fmt::Debug for ControlPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::OpenLoop(a) => write!(f, "OpenLoop({a:?})"),
            Self::Feedback(_) => f.write_str("Feedback(..)"),
        }
    }
}

impl ControlPolicy {
    pub fn constant(action: usize, n_steps: usize) -> Self {
        Self::OpenLoop(vec![action; n_steps])
    }

    pub fn feedback(f: impl Fn(usize, &PathPrefix<'_>) -> usize + Send + Sync + 'static) -> Self {
        Self::Feedback(Arc::new(f))
    }

    pub fn action_at(&self, j: usize, x: &PathPrefix<'_>) -> usize {
        match self {
            Self::OpenLoop(a) => a[j],
            Self::Feedback(f) => f(j, x),
        }
    }
}

/// Optional declaration `b̄(t,x,a) = σ̄(t,x) b̄₀(t,x,a)` with `b̄₀` K-valued.
#[derive(Clone)]
pub struct StructureCondition {
    pub b0: ControlledDrift,
}

impl std::fmt::Debug for StructureCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("StructureCondition(..)")
    }
}

#[derive(Debug, Clone)]
pub struct ControlledSdeProblem {
    pub model: SpectralModel,
    pub drift: ControlledDrift,
    pub diffusion: ControlledDiffusion,
    pub actions: Vec<Action>,
    pub initial: DiscretePath,
    pub start: usize,
    pub structure: Option<StructureCondition>,
}

impl ControlledSdeProblem {
    pub fn new(
        model: SpectralModel,
        drift: ControlledDrift,
        diffusion: ControlledDiffusion,
        actions: Vec<Action>,
        initial: DiscretePath,
        start: usize,
    ) -> Result<Self> {
        check_setup(&model, &initial, start)?;
        if actions.is_empty() {
            return Err(Error::Empty("action set"));
        }
        Ok(Self {
            model,
            drift,
            diffusion,
            actions,
            initial,
            start,
            structure: None,
        })
    }

    pub fn with_structure(mut self, b0: ControlledDrift) -> Self {
        self.structure = Some(StructureCondition { b0 });
        self
    }

    pub fn grid(&self) -> &Grid {
        self.initial.grid()
    }

    pub fn restarted(&self, node: usize, x: &DiscretePath) -> Result<Self> {
        let mut p = self.clone();
        check_setup(&p.model, x, node)?;
        p.initial = x.clone();
        p.start = node;
        Ok(p)
    }

    /// Same problem restricted to a subset of actions (by index).
    pub fn with_actions(&self, keep: &[usize]) -> Result<Self> {
        let actions: Vec<Action> = keep
            .iter()
            .map(|i| self.actions.get(*i).cloned().ok_or(invalid("actions", "index out of range")))
            .collect::<Result<_>>()?;
        if actions.is_empty() {
            return Err(Error::Empty("action set"));
        }
        let mut p = self.clone();
        p.actions = actions;
        Ok(p)
    }

    /// The uncontrolled problem obtained by freezing action `a`.
    pub fn frozen(&self, a: usize) -> SdeProblem {
        let value = self.actions[a].value;
        let b = self.drift.clone();
        let s = self.diffusion.clone();
        let diffusion = match &s {
            ControlledDiffusion::Uncontrolled(d) => d.clone(),
            ControlledDiffusion::Functional(_) => {
                Diffusion::functional(move |j, x| s.matrix(j, x, value))
            }
        };
        SdeProblem {
            model: self.model.clone(),
            drift: Drift::new(move |j, x, out| b.eval(j, x, value, out)),
            diffusion,
            initial: self.initial.clone(),
            start: self.start,
        }
    }
}

/// One controlled mild path under `policy`; the realized actions are returned
/// alongside (one per step from the start node).
pub fn simulate_controlled(
    problem: &ControlledSdeProblem,
    policy: &ControlPolicy,
    noise: &dyn NoiseSource,
) -> Result<(DiscretePath, Vec<usize>)> {
    let grid = *problem.grid();
    let factors = stepper_factors(&problem.model, &grid);
    simulate_controlled_from(problem, problem.start, &problem.initial, policy, noise, &factors)
}

pub(crate) fn simulate_controlled_from(
    problem: &ControlledSdeProblem,
    node: usize,
    x: &DiscretePath,
    policy: &ControlPolicy,
    noise: &dyn NoiseSource,
    factors: &[f64],
) -> Result<(DiscretePath, Vec<usize>)> {
    let grid = *x.grid();
    let n = grid.n_steps;
    let dt = grid.dt();
    let dim_k = noise.dim_k();
    if let ControlPolicy::OpenLoop(a) = policy {
        if a.len() < n {
            return Err(invalid("policy", format!("open-loop policy covers {} of {n} steps", a.len())));
        }
    }
    let mut dw = Vec::new();
    noise.fill(node, n - node, dt, &mut dw);
    let mut values = initial_values(x, node);
    let mut b = vec![0.0; problem.model.dim_h];
    let mut taken = Vec::with_capacity(n - node);
    let mut bad_action = None;
    evolve(&grid, factors, &mut values, node, &dw, dim_k, |j, prefix, w, incr| {
        let a = policy.action_at(j, prefix);
        let Some(action) = problem.actions.get(a) else {
            bad_action = Some(a);
            incr.fill(f64::NAN);
            return;
        };
        taken.push(a);
        controlled_increment(problem, j, prefix, action.value, w, dt, &mut b, incr);
    })
    .map_err(|e| match bad_action {
        Some(a) => invalid("policy", format!("action index {a} is not in U")),
        None => e,
    })?;
    Ok((DiscretePath::from_values(grid, problem.model.dim_h, values)?, taken))
}

/// Restart `X^{t,z}` from `X^{t,z}_{·∧s}` with the same noise keys and return
/// the largest node-wise deviation from the uninterrupted path.
pub fn flow_check(problem: &SdeProblem, s: f64, noise: &dyn NoiseSource) -> Result<f64> {
    let grid = *problem.grid();
    let s_node = grid.node_of(s)?;
    if s_node < problem.start {
        return Err(invalid("s", "restart time precedes the initial time"));
    }
    let factors = stepper_factors(&problem.model, &grid);
    let full = simulate_mild_from(problem, problem.start, &problem.initial, noise, &factors)?;
    let restarted = simulate_mild_from(problem, s_node, &full, noise, &factors)?;
    Ok(max_node_deviation(&full, &restarted))
}

pub(crate) fn max_node_deviation(a: &DiscretePath, b: &DiscretePath) -> f64 {
    let dim = a.dim();
    let mut diff = vec![0.0; dim];
    let mut worst = 0.0f64;
    for (ra, rb) in a.values().chunks(dim).zip(b.values().chunks(dim)) {
        for k in 0..dim {
            diff[k] = ra[k] - rb[k];
        }
        worst = worst.max(norm(&diff));
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMeta {
    pub seed: u64,
    pub start: usize,
    pub t: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub dt: f64,
    pub kind: NoiseKind,
    pub scheme: String,
}

/// Seeded collection of mild paths `X^{t,z}`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: Vec<DiscretePath>,
    pub keys: Vec<NoiseStream>,
    pub meta: EnsembleMeta,
}

impl PathEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Regenerate member `i` from its key.
    pub fn regenerate(&self, problem: &SdeProblem, i: usize) -> Result<DiscretePath> {
        simulate_mild(problem, &self.keys[i])
    }

    /// Little-endian binary layout: magic `PPDE`, version u32, dim_h u32,
    /// n_steps u32, n_paths u64, seed u64, t f64, T f64, then every path
    /// node-major as f64.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        let dim = self.paths.first().map_or(0, |p| p.dim());
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_VERSION.to_le_bytes())?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(self.meta.n_steps as u32).to_le_bytes())?;
        w.write_all(&(self.paths.len() as u64).to_le_bytes())?;
        w.write_all(&self.meta.seed.to_le_bytes())?;
        w.write_all(&self.meta.t.to_le_bytes())?;
        w.write_all(&self.meta.horizon.to_le_bytes())?;
        for p in &self.paths {
            for v in p.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }
}

pub const ENSEMBLE_MAGIC: &[u8; 4] = b"PPDE";
pub const ENSEMBLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleFile {
    pub dim_h: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub t: f64,
    pub horizon: f64,
    pub paths: Vec<DiscretePath>,
}

/// Parse the format written by [`PathEnsemble::write_to`].
pub fn read_ensemble(r: &mut impl Read) -> Result<EnsembleFile> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    const HEADER: usize = 4 + 4 + 4 + 4 + 8 + 8 + 8 + 8;
    if buf.len() < HEADER || &buf[..4] != ENSEMBLE_MAGIC {
        return Err(Error::Format("bad magic or truncated header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != ENSEMBLE_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let dim_h = u32_at(8) as usize;
    let n_steps = u32_at(12) as usize;
    let n_paths = u64_at(16) as usize;
    let seed = u64_at(24);
    let t = f64_at(32);
    let horizon = f64_at(40);
    let per_path = (n_steps + 1) * dim_h;
    if buf.len() != HEADER + n_paths * per_path * 8 {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            n_paths * per_path * 8,
            buf.len() - HEADER
        )));
    }
    let grid = Grid::new(n_steps, horizon).map_err(|e| Error::Format(e.to_string()))?;
    let mut paths = Vec::with_capacity(n_paths);
    for i in 0..n_paths {
        let base = HEADER + i * per_path * 8;
        let values = (0..per_path).map(|k| f64_at(base + 8 * k)).collect();
        paths.push(DiscretePath::from_values(grid, dim_h, values)?);
    }
    Ok(EnsembleFile {
        dim_h,
        n_steps,
        seed,
        t,
        horizon,
        paths,
    })
}

/// Empirical `E[|X|_∞^p]` of an ensemble.
#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub p: f64,
    pub moment: Estimate,
    pub finite: bool,
}

pub fn ensemble_simulate(
    problem: &SdeProblem,
    n_paths: usize,
    seed: u64,
    kind: NoiseKind,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(invalid("n_paths", "must be at least 1"));
    }
    let grid = *problem.grid();
    let factors = stepper_factors(&problem.model, &grid);
    let keys: Vec<NoiseStream> = (0..n_paths as u64).map(|i| problem.noise(seed, i, kind)).collect();
    let paths = par_map(n_paths, |i| {
        simulate_mild_from(problem, problem.start, &problem.initial, &keys[i], &factors)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(PathEnsemble {
        paths,
        keys,
        meta: EnsembleMeta {
            seed,
            start: problem.start,
            t: grid.time(problem.start),
            horizon: grid.horizon,
            n_steps: grid.n_steps,
            dt: grid.dt(),
            kind,
            scheme: "exponential-euler".into(),
        },
    })
}

pub fn sup_moment(ensemble: &PathEnsemble, p: f64) -> MomentReport {
    let xs: Vec<f64> = ensemble.paths.iter().map(|x| sup_norm(x).powf(p)).collect();
    let moment = Estimate::from_samples(&xs);
    MomentReport {
        p,
        finite: moment.mean.is_finite() && moment.stderr.is_finite(),
        moment,
    }
}

/// Ensemble `L^p` distance of sup-deviations between two problems driven by
/// common noise.
pub fn paired_sup_deviation(
    a: &SdeProblem,
    b: &SdeProblem,
    n_paths: usize,
    seed: u64,
    kind: NoiseKind,
    p: f64,
) -> Result<Estimate> {
    if a.grid() != b.grid() || a.model.dim_h != b.model.dim_h || a.model.dim_k != b.model.dim_k {
        return Err(Error::GridMismatch);
    }
    let grid = *a.grid();
    let fa = stepper_factors(&a.model, &grid);
    let fb = stepper_factors(&b.model, &grid);
    let devs = par_map(n_paths, |i| -> Result<f64> {
        let key = a.noise(seed, i as u64, kind);
        let xa = simulate_mild_from(a, a.start, &a.initial, &key, &fa)?;
        let xb = simulate_mild_from(b, b.start, &b.initial, &key, &fb)?;
        Ok(max_node_deviation(&xa, &xb).powf(p))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&devs))
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityCurve {
    /// `(E|X^(n) - X|_∞^p)^{1/p}` per approximating problem.
    pub errors: Vec<f64>,
    pub nonincreasing: bool,
    pub final_error: f64,
}

/// Convergence of mild solutions under coefficient approximation, with all
/// problems sharing the grid and the noise keys.
pub fn sde_stability_check(
    sequence: &[SdeProblem],
    limit: &SdeProblem,
    n_paths: usize,
    seed: u64,
    p: f64,
) -> Result<StabilityCurve> {
    if sequence.is_empty() {
        return Err(Error::Empty("problem sequence"));
    }
    let seed = derive_seed(seed, 0x57ab);
    let mut errors = Vec::with_capacity(sequence.len());
    for prob in sequence {
        let e = paired_sup_deviation(prob, limit, n_paths, seed, NoiseKind::Gaussian, p)?;
        errors.push(e.mean.powf(1.0 / p));
    }
    let nonincreasing = errors.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
    Ok(StabilityCurve {
        final_error: *errors.last().unwrap(),
        errors,
        nonincreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::Diffusion;

    fn scalar(lambda: f64, horizon: f64) -> SpectralModel {
        SpectralModel::new(1, vec![lambda], 0.0, 1.0, 1.0, horizon).unwrap()
    }

    fn problem(lambda: f64, drift: Drift, sigma: f64, n: usize, z: f64) -> SdeProblem {
        let model = scalar(lambda, 1.0);
        let grid = Grid::new(n, 1.0).unwrap();
        SdeProblem::new(
            model,
            drift,
            Diffusion::diagonal(1, 1, vec![sigma]),
            DiscretePath::constant(grid, &[z]),
            0,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_constant_path() {
        let p = problem(0.0, Drift::zero(), 0.0, 8, 2.5);
        let x = simulate_mild(&p, &p.noise(1, 0, NoiseKind::Gaussian)).unwrap();
        assert!(x.values().iter().all(|v| *v == 2.5));
    }

    #[test]
    fn semigroup_flow_is_exact_at_nodes() {
        let p = problem(-1.0, Drift::zero(), 0.0, 64, 1.0);
        let x = simulate_mild(&p, &p.noise(1, 0, NoiseKind::Gaussian)).unwrap();
        assert!((x.row(64)[0] - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn constant_drift_is_exact() {
        let p = problem(0.0, Drift::constant(vec![0.75]), 0.0, 16, 1.0);
        let x = simulate_mild(&p, &p.noise(1, 0, NoiseKind::Gaussian)).unwrap();
        for j in 0..=16 {
            assert!((x.row(j)[0] - (1.0 + 0.75 * p.grid().time(j))).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_coefficients_name_the_step() {
        let bad = Drift::new(|j, _, out| out[0] = if j == 3 { f64::NAN } else { 0.0 });
        let p = problem(0.0, bad, 0.0, 8, 1.0);
        let err = simulate_mild(&p, &p.noise(1, 0, NoiseKind::Gaussian)).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 3, .. }));
    }

    #[test]
    fn flow_restart_at_start_is_trivial() {
        let p = problem(-1.0, Drift::running_sup(0.3), 0.5, 32, 1.0);
        let noise = p.noise(3, 0, NoiseKind::Gaussian);
        assert_eq!(flow_check(&p, 0.0, &noise).unwrap(), 0.0);
        assert_eq!(flow_check(&p, 0.5, &noise).unwrap(), 0.0);
        assert!(flow_check(&p, 0.51, &noise).is_err());
    }

    #[test]
    fn degenerate_action_set_matches_uncontrolled() {
        let p = problem(-1.0, Drift::affine(-0.5, vec![0.1]), 0.4, 32, 1.0);
        let cp = ControlledSdeProblem::new(
            p.model.clone(),
            ControlledDrift::uncontrolled(p.drift.clone()),
            ControlledDiffusion::Uncontrolled(p.diffusion.clone()),
            vec![Action::new("only", 0.0)],
            p.initial.clone(),
            0,
        )
        .unwrap();
        let noise = p.noise(9, 4, NoiseKind::Gaussian);
        let x = simulate_mild(&p, &noise).unwrap();
        let (y, _) = simulate_controlled(&cp, &ControlPolicy::constant(0, 32), &noise).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn bang_bang_controls_integrate_exactly() {
        let model = scalar(0.0, 1.0);
        let grid = Grid::new(8, 1.0).unwrap();
        let cp = ControlledSdeProblem::new(
            model,
            ControlledDrift::action_shift(Drift::zero(), 0),
            ControlledDiffusion::Uncontrolled(Diffusion::zero(1, 1)),
            vec![Action::new("down", -1.0), Action::new("up", 1.0)],
            DiscretePath::constant(grid, &[0.25]),
            0,
        )
        .unwrap();
        let noise = NoiseStream::new(0, 0, 1, NoiseKind::Gaussian);
        let (x, _) = simulate_controlled(&cp, &ControlPolicy::constant(1, 8), &noise).unwrap();
        assert_eq!(x.row(8)[0], 1.25);
        let switching = ControlPolicy::OpenLoop(vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let (x, taken) = simulate_controlled(&cp, &switching, &noise).unwrap();
        assert_eq!(x.row(8)[0], 0.25);
        assert_eq!(taken, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        let out_of_range = ControlPolicy::constant(5, 8);
        assert!(simulate_controlled(&cp, &out_of_range, &noise).is_err());
    }

    #[test]
    fn ensemble_round_trips_through_binary_format() {
        let p = problem(-1.0, Drift::zero(), 0.5, 8, 1.0);
        let e = ensemble_simulate(&p, 5, 77, NoiseKind::Gaussian).unwrap();
        let mut buf = Vec::new();
        e.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 48 + 5 * 9 * 8);
        let f = read_ensemble(&mut buf.as_slice()).unwrap();
        assert_eq!(f.paths, e.paths);
        assert_eq!((f.seed, f.n_steps, f.dim_h), (77, 8, 1));
        assert_eq!(e.regenerate(&p, 3).unwrap(), e.paths[3]);
        buf[0] = b'X';
        assert!(read_ensemble(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn deterministic_ensemble_members_coincide() {
        let p = problem(-0.5, Drift::running_integral(0.2), 0.0, 16, 1.0);
        let e = ensemble_simulate(&p, 4, 1, NoiseKind::Gaussian).unwrap();
        assert!(e.paths.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn drift_perturbation_error_is_linear() {
        let base = problem(0.0, Drift::zero(), 0.0, 16, 0.0);
        let seq: Vec<SdeProblem> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|n| {
                let mut q = base.clone();
                q.drift = Drift::zero().shifted(0, 1.0 / n);
                q
            })
            .collect();
        let curve = sde_stability_check(&seq, &base, 3, 5, 2.0).unwrap();
        for (e, n) in curve.errors.iter().zip([1.0, 2.0, 4.0, 8.0]) {
            assert!((e - 1.0 / n).abs() < 1e-12, "{e} vs {}", 1.0 / n);
        }
        assert!(curve.nonincreasing);
    }
}
