//! Statistical certification of sub-, super- and exact solutions.
//!
//! Everything here is built on one drift estimator,
//! `E[u(s, X^{t,x}) + ∫_t^s F(r, X, u(r, X)) dr] - u(t, x)`, restarted from
//! stopped paths. Verdicts use fixed z thresholds, Bonferroni-corrected over
//! the rows of a single report.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coeffs::{Nonlinearity, PathFunctional};
use crate::error::{invalid, Result};
use crate::noise::{derive_seed, NoiseKind};
use crate::path::{DiscretePath, PathPrefix};
use crate::ppde::{drift_estimates, picard_solve, McConfig, SolverConfig, ValueFn, VERIFY_TAG};
use crate::sde::SdeProblem;
use crate::stats::{bonferroni_z, Estimate};
use crate::stopping::{exact_tree_stop, lsm_stop, tree_guard, StopConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sub,
    Super,
    Exact,
}

/// A point `(t, x)` with a later node `s`.
#[derive(Debug, Clone)]
pub struct Probe {
    pub node: usize,
    pub path: DiscretePath,
    pub s: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeRow {
    pub probe: usize,
    pub t: f64,
    pub s: f64,
    pub drift: f64,
    pub stderr: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub mode: Mode,
    pub threshold: f64,
    pub rows: Vec<ProbeRow>,
    pub passed: usize,
    pub failed: usize,
}

impl MartingaleReport {
    pub fn all_pass(&self) -> bool {
        self.failed == 0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("probe,t,s,drift,stderr,z,verdict\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.probe,
                r.t,
                r.s,
                r.drift,
                r.stderr,
                r.z,
                if r.pass { "pass" } else { "fail" }
            ));
        }
        out
    }
}

pub fn verdict(mode: Mode, z: f64, threshold: f64) -> bool {
    match mode {
        Mode::Sub => z >= -threshold,
        Mode::Super => z <= threshold,
        Mode::Exact => z.abs() <= threshold,
    }
}

/// Drift of `u(s, X) + ∫ F` between `t` and `s` at every probe.
pub fn probe_drifts(
    u: &dyn ValueFn,
    problem: &SdeProblem,
    f: &Nonlinearity,
    probes: &[Probe],
    mc: &McConfig,
) -> Result<Vec<Estimate>> {
    probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.s <= p.node {
                return Err(invalid("s", format!("probe {i}: s node {} is not after t node {}", p.s, p.node)));
            }
            let seed = derive_seed(derive_seed(mc.seed, VERIFY_TAG), i as u64);
            Ok(drift_estimates(u, problem, f, p.node, &p.path, &[p.s], mc.n_paths, seed, mc.noise)?[0])
        })
        .collect()
}

pub fn martingale_test(
    u: &dyn ValueFn,
    problem: &SdeProblem,
    f: &Nonlinearity,
    probes: &[Probe],
    mode: Mode,
    mc: &McConfig,
) -> Result<MartingaleReport> {
    let drifts = probe_drifts(u, problem, f, probes, mc)?;
    Ok(report_from(mode, problem, probes, &drifts))
}

pub fn report_from(mode: Mode, problem: &SdeProblem, probes: &[Probe], drifts: &[Estimate]) -> MartingaleReport {
    let grid = problem.grid();
    let threshold = bonferroni_z(probes.len());
    let rows: Vec<ProbeRow> = probes
        .iter()
        .zip(drifts)
        .enumerate()
        .map(|(i, (p, d))| {
            let z = d.z_against(0.0);
            ProbeRow {
                probe: i,
                t: grid.time(p.node),
                s: grid.time(p.s),
                drift: d.mean,
                stderr: d.stderr,
                z,
                pass: verdict(mode, z, threshold),
            }
        })
        .collect();
    let passed = rows.iter().filter(|r| r.pass).count();
    MartingaleReport {
        mode,
        threshold,
        failed: rows.len() - passed,
        passed,
        rows,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JetKind {
    /// `min_τ E[(φ - u)(τ ∧ h)]` attained at `τ = t`.
    Sub,
    /// `max_τ E[(φ - u)(τ ∧ h)]` attained at `τ = t`.
    Super,
}

#[derive(Debug, Clone, Serialize)]
pub struct JetReport {
    pub kind: JetKind,
    pub alpha: f64,
    /// Best estimated improvement over stopping at `t` (0 when stopping
    /// immediately is optimal).
    pub gap: Estimate,
    pub gap_tolerance: f64,
    pub member: bool,
    /// `-α - F(t, x, u(t, x))`.
    pub residual: f64,
    pub residual_tolerance: f64,
    /// Whether the inequality holds; `None` when `α` is not a member.
    pub inequality: Option<bool>,
    pub exact: bool,
}

/// `sign · (u - α t)`.
struct JetGain {
    u: Arc<dyn ValueFn>,
    alpha: f64,
    sign: f64,
}

impl ValueFn for JetGain {
    fn value(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        self.sign * (self.u.value(node, x) - self.alpha * x.time())
    }

    fn along(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        let g = path.grid();
        self.u
            .along(path, from)
            .into_iter()
            .enumerate()
            .map(|(i, v)| self.sign * (v - self.alpha * g.time(from + i)))
            .collect()
    }
}

/// Decide whether `α` belongs to the sub- or superjet of `u` at `(t, x)` with
/// the deterministic localizer `h`, and check the jet inequality if it does.
///
/// With Bernoulli noise and a small enough tree the stopping problem is
/// solved exactly; otherwise the gap is the best of every deterministic time
/// in `(t, h]` and the fresh-seed value of a regression stopping rule.
#[allow(clippy::too_many_arguments)]
pub fn jet_probe(
    u: Arc<dyn ValueFn>,
    problem: &SdeProblem,
    f: &Nonlinearity,
    node: usize,
    x: &DiscretePath,
    alpha: f64,
    h: usize,
    kind: JetKind,
    stop_cfg: &StopConfig,
) -> Result<JetReport> {
    let grid = *problem.grid();
    grid.check_node(h)?;
    if h <= node {
        return Err(invalid("h", format!("localizer node {h} must be after t node {node}")));
    }
    let sign = match kind {
        JetKind::Sub => 1.0,
        JetKind::Super => -1.0,
    };
    let gain = JetGain {
        u: u.clone(),
        alpha,
        sign,
    };
    let prefix = x.prefix(node)?;
    let u_tx = u.value(node, &prefix);
    let residual = -alpha - f.eval(node, &prefix, u_tx);
    let horizon = grid.time(h) - grid.time(node);

    let exact = stop_cfg.noise == NoiseKind::Bernoulli && tree_guard(h - node, problem.model.dim_k).is_ok();
    let (gap, tol) = if exact {
        let tree = exact_tree_stop(&gain, problem, node, x, h)?;
        let root = tree.root();
        let g = (root.value - root.stop_value).max(0.0);
        (Estimate::exact(g), 1e-12 * (1.0 + root.stop_value.abs()))
    } else {
        let zero = Nonlinearity::zero();
        let s_nodes: Vec<usize> = (node + 1..=h).collect();
        let seed = derive_seed(stop_cfg.seed, VERIFY_TAG);
        let fixed = drift_estimates(&gain, problem, &zero, node, x, &s_nodes, stop_cfg.n_eval_paths, seed, stop_cfg.noise)?;
        let rule = lsm_stop(&gain, problem, node, x, h, stop_cfg)?;
        let from_rule = Estimate {
            mean: rule.low.mean - rule.immediate,
            ..rule.low
        };
        let best = fixed
            .into_iter()
            .chain(std::iter::once(from_rule))
            .fold(Estimate::exact(0.0), |a, b| if b.mean > a.mean { b } else { a });
        let z = bonferroni_z(h - node + 1);
        (best, z * best.stderr)
    };
    let member = gap.mean <= tol;
    let residual_tolerance = if exact { 1e-12 } else { tol.max(gap.stderr * 3.0) / horizon };
    let inequality = member.then(|| match kind {
        JetKind::Sub => residual <= residual_tolerance,
        JetKind::Super => residual >= -residual_tolerance,
    });
    Ok(JetReport {
        kind,
        alpha,
        gap,
        gap_tolerance: tol,
        member,
        residual,
        residual_tolerance,
        inequality,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ComparisonVerdict {
    Holds,
    Violated { probes: Vec<usize> },
    /// The inputs are not a certified sub/supersolution pair.
    NotSubSuperPair { reason: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub verdict: ComparisonVerdict,
    /// `u2(t,x) - u1(t,x)` per probe.
    pub gaps: Vec<f64>,
    pub tolerances: Vec<f64>,
    pub sub_report: MartingaleReport,
    pub super_report: MartingaleReport,
}

impl ComparisonReport {
    pub fn holds(&self) -> bool {
        self.verdict == ComparisonVerdict::Holds
    }
}

/// Comparison `u1 ≤ u2` for a sub/supersolution pair, after certifying both
/// halves of the pair and the terminal ordering on the probe paths.
pub fn comparison_test(
    u1: &dyn ValueFn,
    u2: &dyn ValueFn,
    problem: &SdeProblem,
    f: &Nonlinearity,
    probes: &[Probe],
    mc: &McConfig,
) -> Result<ComparisonReport> {
    let d1 = probe_drifts(u1, problem, f, probes, mc)?;
    let d2 = probe_drifts(u2, problem, f, probes, mc)?;
    let sub_report = report_from(Mode::Sub, problem, probes, &d1);
    let super_report = report_from(Mode::Super, problem, probes, &d2);
    let n = problem.grid().n_steps;
    let mut reasons = Vec::new();
    if !sub_report.all_pass() {
        reasons.push(format!("u1 fails the sub-mode test at {} probe(s)", sub_report.failed));
    }
    if !super_report.all_pass() {
        reasons.push(format!("u2 fails the super-mode test at {} probe(s)", super_report.failed));
    }
    let terminal_bad = probes
        .iter()
        .filter(|p| {
            let full = p.path.prefix_unchecked(n);
            u1.value(n, &full) > u2.value(n, &full)
        })
        .count();
    if terminal_bad > 0 {
        reasons.push(format!("u1(T) > u2(T) on {terminal_bad} probe path(s)"));
    }
    let z = bonferroni_z(probes.len());
    let mut gaps = Vec::with_capacity(probes.len());
    let mut tolerances = Vec::with_capacity(probes.len());
    let mut bad = Vec::new();
    for (i, p) in probes.iter().enumerate() {
        let prefix = p.path.prefix(p.node)?;
        let gap = u2.value(p.node, &prefix) - u1.value(p.node, &prefix);
        let tol = z * d1[i].stderr.hypot(d2[i].stderr);
        if gap + tol < 0.0 {
            bad.push(i);
        }
        gaps.push(gap);
        tolerances.push(tol);
    }
    let verdict = if !reasons.is_empty() {
        ComparisonVerdict::NotSubSuperPair {
            reason: reasons.join("; "),
        }
    } else if !bad.is_empty() {
        ComparisonVerdict::Violated { probes: bad }
    } else {
        ComparisonVerdict::Holds
    };
    Ok(ComparisonReport {
        verdict,
        gaps,
        tolerances,
        sub_report,
        super_report,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionStability {
    /// Per approximating problem, `u_n - u` at every probe.
    pub deviations: Vec<Vec<f64>>,
    /// Per approximating problem, `max |u_n - u|` over probes.
    pub max_deviation: Vec<f64>,
    pub decreasing: bool,
    pub final_deviation: f64,
}

/// Solves every approximating problem and the limit with the same solver
/// configuration (hence the same training noise) and compares at the probes.
pub fn solution_stability_test(
    sequence: &[(SdeProblem, Nonlinearity)],
    limit: &(SdeProblem, Nonlinearity),
    xi: &PathFunctional,
    probes: &[(usize, DiscretePath)],
    cfg: &SolverConfig,
) -> Result<SolutionStability> {
    let u = picard_solve(&limit.0, &limit.1, xi, cfg)?.value;
    let base: Vec<f64> = probes
        .iter()
        .map(|(j, x)| Ok(u.value(*j, &x.prefix(*j)?)))
        .collect::<Result<_>>()?;
    let mut deviations = Vec::with_capacity(sequence.len());
    for (p, f) in sequence {
        let un = picard_solve(p, f, xi, cfg)?.value;
        let dev = probes
            .iter()
            .zip(&base)
            .map(|((j, x), b)| Ok(un.value(*j, &x.prefix(*j)?) - b))
            .collect::<Result<Vec<f64>>>()?;
        deviations.push(dev);
    }
    let max_deviation: Vec<f64> = deviations
        .iter()
        .map(|d| d.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    Ok(SolutionStability {
        decreasing: max_deviation.windows(2).all(|w| w[1] <= w[0]),
        final_deviation: max_deviation.last().copied().unwrap_or(0.0),
        deviations,
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{Diffusion, Drift};
    use crate::path::Grid;
    use crate::spectral::SpectralModel;

    fn bernoulli_problem(n: usize) -> SdeProblem {
        let model = SpectralModel::new(1, vec![-1.0], 0.0, 1.0, 1.0, 1.0).unwrap();
        let grid = Grid::new(n, 1.0).unwrap();
        SdeProblem::new(
            model,
            Drift::zero(),
            Diffusion::diagonal(1, 1, vec![0.5]),
            DiscretePath::constant(grid, &[1.0]),
            0,
        )
        .unwrap()
    }

    #[test]
    fn verdict_thresholds() {
        assert!(verdict(Mode::Sub, 10.0, 3.0));
        assert!(!verdict(Mode::Sub, -3.5, 3.0));
        assert!(verdict(Mode::Super, -10.0, 3.0));
        assert!(!verdict(Mode::Exact, 3.5, 3.0));
    }

    #[test]
    fn zero_solution_subjet_is_nonnegative_slopes() {
        let p = bernoulli_problem(4);
        let u: Arc<dyn ValueFn> = Arc::new(PathFunctional::constant(0.0));
        let cfg = StopConfig {
            noise: NoiseKind::Bernoulli,
            ..StopConfig::default()
        };
        for (alpha, member) in [(-0.5, false), (0.0, true), (0.5, true)] {
            let r = jet_probe(u.clone(), &p, &Nonlinearity::zero(), 1, &p.initial, alpha, 3, JetKind::Sub, &cfg).unwrap();
            assert!(r.exact);
            assert_eq!(r.member, member, "alpha {alpha}");
            if member {
                assert_eq!(r.inequality, Some(true));
            }
        }
    }
}
