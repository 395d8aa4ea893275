//! Stage execution and replay.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ppde_core::coeffs::{PathFunctional, RunningCost};
use ppde_core::control::{
    dpp_check, feedback_policy, gain_estimate, hjb_viscosity_check, value_function, SearchConfig,
};
use ppde_core::noise::{derive_seed, NoiseKind, NoiseStream};
use ppde_core::path::DiscretePath;
use ppde_core::ppde::{bsde_solve, mild_residual, picard_solve, McConfig, SolverConfig, TimeShifted, ValueFn};
use ppde_core::sde::{ensemble_simulate, flow_check, simulate_mild, sup_moment, ControlledSdeProblem, SdeProblem};
use ppde_core::stats::Estimate;
use ppde_core::stopping::{exact_tree_stop, lsm_stop, StopConfig};
use ppde_core::viscosity::{comparison_test, jet_probe, martingale_test, JetKind, MartingaleReport, Mode, Probe};

use crate::report::{num, scenario_digest, write_atomic, Csv, Recorder, RunReport, FORMAT_VERSION};
use crate::scenario::{
    Built, ControlBlock, DiffusionSpec, DriftSpec, Scenario, SimulateBlock, SolverBlock, SolverOracle, StopBlock,
    VerificationBlock,
};
use crate::CliError;

const SIMULATE_TAG: u64 = 0x73696d;
const FLOW_TAG: u64 = 0x666c6f77;
const SOLVE_TAG: u64 = 0x736f6c76;
const PROBE_TAG: u64 = 0x70726f62;
const VERIFY_TAG: u64 = 0x76657269;
const JET_TAG: u64 = 0x6a6574;
const STOP_TAG: u64 = 0x73746f70;
const CONTROL_TAG: u64 = 0x636f6e74;
const FEEDBACK_TAG: u64 = 0x66656564;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Solve,
    Verify,
    Stop,
    Control,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Solve => "solve",
            Self::Verify => "verify",
            Self::Stop => "stop",
            Self::Control => "control",
            Self::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Simulate, Self::Solve, Self::Verify, Self::Stop, Self::Control, Self::All]
            .into_iter()
            .find(|st| st.name() == s)
    }
}

/// What a run will execute, validated before any work starts.
struct Plan {
    simulate: Option<SimulateBlock>,
    solve: Option<(SolverBlock, SolverConfig)>,
    verify: Option<VerificationBlock>,
    stop: Option<(StopBlock, StopConfig)>,
    control: Option<(ControlBlock, ControlledSdeProblem, SearchConfig)>,
}

fn plan(sc: &Scenario, stage: Stage) -> Result<Plan, CliError> {
    let cmd = stage.name();
    let want = |this: Stage, present: bool, block: &str| -> Result<bool, CliError> {
        match stage {
            Stage::All => Ok(present),
            s if s == this => present.then_some(true).ok_or_else(|| CliError::missing_block(block, cmd)),
            _ => Ok(false),
        }
    };
    let simulate = want(Stage::Simulate, sc.simulate.is_some(), "simulate")?;
    let verify = match stage {
        Stage::Verify => {
            if sc.solver.is_none() {
                return Err(CliError::missing_block("solver", cmd));
            }
            if sc.verification.is_none() {
                return Err(CliError::missing_block("verification", cmd));
            }
            true
        }
        Stage::All => {
            if sc.verification.is_some() && sc.solver.is_none() {
                return Err(CliError::missing_block("solver", "verification"));
            }
            sc.verification.is_some()
        }
        _ => false,
    };
    let solve = verify || want(Stage::Solve, sc.solver.is_some(), "solver")?;
    let stop = want(Stage::Stop, sc.stop.is_some(), "stop")?;
    let control = want(Stage::Control, sc.control.is_some(), "control")?;
    if !(simulate || solve || stop || control) {
        return Err(CliError::Schema(
            "missing block: `all` needs at least one of simulate, solver, stop, control".into(),
        ));
    }
    let seed = sc.seed;
    let mut p = Plan {
        simulate: None,
        solve: None,
        verify: None,
        stop: None,
        control: None,
    };
    if simulate {
        let b = sc.simulate.clone().expect("checked");
        if b.ou_oracle {
            if !matches!(sc.coefficients.drift, DriftSpec::Zero) {
                return Err(CliError::schema("simulate.ou_oracle", "needs a zero drift"));
            }
            if !matches!(sc.coefficients.diffusion, DiffusionSpec::Diagonal { .. } | DiffusionSpec::Zero) {
                return Err(CliError::schema("simulate.ou_oracle", "needs a diagonal diffusion"));
            }
        }
        p.simulate = Some(b);
    }
    if solve {
        let b = sc.solver.clone().expect("checked");
        let cfg = sc.solver_config(&b, derive_seed(seed, SOLVE_TAG))?;
        p.solve = Some((b, cfg));
    }
    if verify {
        p.verify = sc.verification.clone();
    }
    if stop {
        let b = sc.stop.clone().expect("checked");
        let cfg = sc.stop_config(&b, derive_seed(seed, STOP_TAG))?;
        p.stop = Some((b, cfg));
    }
    if control {
        let b = sc.control.clone().expect("checked");
        let cp = sc.controlled(&b)?;
        let cfg = sc.search_config(&b, derive_seed(seed, CONTROL_TAG))?;
        p.control = Some((b, cp, cfg));
    }
    Ok(p)
}

pub fn run_scenario(mut sc: Scenario, stage: Stage, seed: Option<u64>, out: &Path) -> Result<RunReport, CliError> {
    if let Some(s) = seed {
        sc.seed = s;
    }
    let built = sc.build()?;
    let plan = plan(&sc, stage)?;
    let mut rec = Recorder::new(out)?;
    let seed = sc.seed;

    let timed = |rec: &mut Recorder, name: &str, start: Instant| {
        rec.timings.insert(name.to_string(), start.elapsed().as_secs_f64());
    };
    if let Some(b) = &plan.simulate {
        let t0 = Instant::now();
        simulate(&sc, b, &built, seed, &mut rec)?;
        timed(&mut rec, "simulate", t0);
    }
    if let Some((b, cfg)) = &plan.solve {
        let t0 = Instant::now();
        let u = solve(b, cfg, &built, seed, &mut rec)?;
        timed(&mut rec, "solve", t0);
        if let Some(v) = &plan.verify {
            let t0 = Instant::now();
            verify(v, cfg, &built, u, seed, &mut rec)?;
            timed(&mut rec, "verify", t0);
        }
    }
    if let Some((b, cfg)) = &plan.stop {
        let t0 = Instant::now();
        stop(&sc, b, cfg, &built, &mut rec)?;
        timed(&mut rec, "stop", t0);
    }
    if let Some((b, cp, cfg)) = &plan.control {
        let t0 = Instant::now();
        control(&sc, b, cp, cfg, &built, seed, &mut rec)?;
        timed(&mut rec, "control", t0);
    }

    let report = RunReport {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: stage.name().to_string(),
        seed,
        scenario_digest: scenario_digest(&sc),
        scenario: sc,
        passed: rec.checks.iter().all(|c| c.passed),
        checks: rec.checks,
        results: rec.results,
        artifacts: rec.artifacts,
        timings: rec.timings,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    write_atomic(&out.join("report.json"), text.as_bytes())?;
    Ok(report)
}

/// A simulated path under an independent seed; its prefixes are typical
/// stopped paths.
fn typical_path(p: &SdeProblem, seed: u64, i: usize, kind: NoiseKind) -> Result<DiscretePath, CliError> {
    let key = NoiseStream::new(derive_seed(seed, PROBE_TAG), i as u64, p.model.dim_k, kind);
    Ok(simulate_mild(p, &key)?)
}

/// Probe nodes spread over the first seven eighths of `[start, n)`.
fn probe_node(p: &SdeProblem, i: usize) -> usize {
    let n = p.grid().n_steps;
    let width = n - p.start;
    let span = (width - width / 8).max(1);
    p.start + (i * 7) % span
}

fn simulate(sc: &Scenario, b: &SimulateBlock, built: &Built, seed: u64, rec: &mut Recorder) -> Result<(), CliError> {
    let p = &built.problem;
    let grid = *p.grid();
    let n = grid.n_steps;
    let e = ensemble_simulate(p, b.n_paths, derive_seed(seed, SIMULATE_TAG), built.noise)?;
    let mut bytes = Vec::new();
    e.write_to(&mut bytes)?;
    rec.write("ensemble.bin", &bytes)?;

    let mut csv = Csv::new(&["quantity", "mode", "p", "value", "stderr"]);
    let mut terminal = Vec::new();
    for k in 0..p.model.dim_h {
        let xs: Vec<f64> = e.paths.iter().map(|x| x.row(n)[k]).collect();
        let (mean, var) = (Estimate::from_samples(&xs), Estimate::variance(&xs));
        csv.row(&["terminal_mean".into(), k.to_string(), String::new(), num(mean.mean), num(mean.stderr)]);
        csv.row(&["terminal_variance".into(), k.to_string(), String::new(), num(var.mean), num(var.stderr)]);
        rec.estimate(format!("terminal_mean[{k}]"), mean);
        rec.estimate(format!("terminal_variance[{k}]"), var);
        terminal.push((mean, var));
    }
    for &q in &b.moments {
        let m = sup_moment(&e, q);
        csv.row(&["sup_moment".into(), String::new(), num(q), num(m.moment.mean), num(m.moment.stderr)]);
        rec.estimate(format!("sup_moment[p={q}]"), m.moment);
        rec.check(
            &format!("sup_moment_finite[p={q}]"),
            m.finite,
            m.moment.mean,
            Some(m.moment.stderr),
            f64::INFINITY,
            "E[sup |X|^p] is finite".into(),
        );
    }
    rec.write("moments.csv", &csv.into_bytes())?;

    if b.ou_oracle {
        let tau = grid.horizon - grid.time(p.start);
        let diag: Vec<f64> = match &sc.coefficients.diffusion {
            DiffusionSpec::Diagonal { diag } => diag.clone(),
            DiffusionSpec::Zero => Vec::new(),
        };
        for (k, (mean, var)) in terminal.iter().enumerate() {
            let l = p.model.eigenvalues[k];
            let s = diag.get(k).copied().unwrap_or(0.0);
            let x0 = p.initial.row(p.start)[k];
            let m_exact = (l * tau).exp() * x0;
            // law of the exponential-Euler chain: σ² Δ Σ_{k=1}^{m} e^{2λkΔ}
            let dt = grid.dt();
            let m = grid.n_steps - p.start;
            let v_exact = s * s * dt * (1..=m).map(|k| (2.0 * l * dt * k as f64).exp()).sum::<f64>();
            rec.check_near(&format!("ou_terminal_mean[{k}]"), *mean, m_exact, 3.0 * mean.stderr);
            rec.check_near(&format!("ou_terminal_variance[{k}]"), *var, v_exact, 3.0 * var.stderr);
        }
    }

    if !b.flow_times.is_empty() {
        let mut csv = Csv::new(&["path", "s", "deviation"]);
        let mut worst: f64 = 0.0;
        for i in 0..b.flow_paths {
            let key = NoiseStream::new(derive_seed(seed, FLOW_TAG), i as u64, p.model.dim_k, built.noise);
            for &s in &b.flow_times {
                let d = flow_check(p, s, &key)?;
                worst = worst.max(d);
                csv.row(&[i.to_string(), num(s), num(d)]);
            }
        }
        rec.write("flow.csv", &csv.into_bytes())?;
        rec.check("flow_exact", worst == 0.0, worst, None, 0.0, "max restart deviation".into());
    }
    Ok(())
}

fn solve(
    b: &SolverBlock,
    cfg: &SolverConfig,
    built: &Built,
    seed: u64,
    rec: &mut Recorder,
) -> Result<Arc<dyn ValueFn>, CliError> {
    let p = &built.problem;
    let grid = *p.grid();
    let sol = picard_solve(p, &built.f, &built.xi, cfg)?;
    rec.write("value.json", sol.value.to_json().as_bytes())?;

    let mut windows = Csv::new(&["window", "start", "end", "length", "contraction_bound", "iterations", "max_ratio"]);
    let mut changes = Csv::new(&["window", "iteration", "change"]);
    let mut excess = f64::NEG_INFINITY;
    for (w, r) in sol.windows.iter().enumerate() {
        windows.row(&[
            w.to_string(),
            r.start.to_string(),
            r.end.to_string(),
            num(r.length),
            num(r.contraction_bound),
            r.iterations.to_string(),
            num(r.max_ratio()),
        ]);
        for (i, c) in r.changes.iter().enumerate() {
            changes.row(&[w.to_string(), (i + 1).to_string(), num(*c)]);
        }
        excess = excess.max(r.max_ratio() - r.contraction_bound);
    }
    rec.write("picard_windows.csv", &windows.into_bytes())?;
    rec.write("picard_changes.csv", &changes.into_bytes())?;
    rec.exact("epsilon", sol.epsilon);
    rec.exact("windows", sol.windows.len() as f64);
    rec.estimate("u0", sol.initial_value);
    rec.check(
        "picard_contraction",
        excess <= b.contraction_margin,
        excess,
        None,
        b.contraction_margin,
        "max over windows of (change ratio - eps L (1 + M))".into(),
    );

    let horizon = grid.horizon;
    let oracle = |t: f64| match &b.oracle {
        Some(SolverOracle::Exponential { rate, .. }) => (rate * (horizon - t)).exp(),
        None => f64::NAN,
    };
    let u: Arc<dyn ValueFn> = Arc::new(sol.value);
    let mut table = Csv::new(&["probe", "node", "t", "value", "oracle"]);
    for i in 0..b.n_probes {
        let x = typical_path(p, seed, i, built.noise)?;
        let j = probe_node(p, i);
        let t = grid.time(j);
        table.row(&[i.to_string(), j.to_string(), num(t), num(u.value(j, &x.prefix(j)?)), num(oracle(t))]);
    }
    rec.write("solution.csv", &table.into_bytes())?;

    if let Some(SolverOracle::Exponential { rel_tol, .. }) = &b.oracle {
        let exact = oracle(grid.time(p.start));
        let est = sol.initial_value;
        rec.check_near("exponential_oracle", est, exact, (3.0 * est.stderr).max(rel_tol * exact.abs()));
    }
    if b.bsde {
        let (y, _) = bsde_solve(p, &built.f, &built.xi, p.start, &p.initial, cfg)?;
        rec.estimate("bsde_u0", y);
        let tol = 3.0 * y.stderr.hypot(sol.initial_value.stderr);
        rec.check_near("bsde_agrees_with_picard", y, sol.initial_value.mean, tol);
    }
    Ok(u)
}

fn martingale_check(rec: &mut Recorder, name: &str, r: &MartingaleReport, want_pass: bool) {
    let worst = r.rows.iter().map(|row| row.z.abs()).fold(0.0, f64::max);
    let passed = if want_pass { r.all_pass() } else { r.failed >= 1 };
    let detail = format!(
        "mode {:?}: {} of {} probes pass at z {:.3}",
        r.mode,
        r.passed,
        r.rows.len(),
        r.threshold
    );
    rec.check(name, passed, worst, Some(1.0), r.threshold, detail);
}

fn verify(
    v: &VerificationBlock,
    cfg: &SolverConfig,
    built: &Built,
    u: Arc<dyn ValueFn>,
    seed: u64,
    rec: &mut Recorder,
) -> Result<(), CliError> {
    let p = &built.problem;
    let f = &built.f;
    let grid = *p.grid();
    let n = grid.n_steps;
    let probes: Vec<Probe> = (0..v.n_probes)
        .map(|i| {
            Ok(Probe {
                node: probe_node(p, i),
                path: typical_path(p, seed, i, built.noise)?,
                s: n,
            })
        })
        .collect::<Result<_, CliError>>()?;
    let mc = McConfig {
        n_paths: v.n_paths,
        seed: derive_seed(seed, VERIFY_TAG),
        noise: built.noise,
    };

    let exact = martingale_test(&u, p, f, &probes, Mode::Exact, &mc)?;
    rec.write("martingale_exact.csv", exact.to_csv().as_bytes())?;
    martingale_check(rec, "martingale_exact", &exact, true);

    let c = v.shift_c;
    let sub: Arc<dyn ValueFn> = Arc::new(TimeShifted::new(u.clone(), -c));
    let sup: Arc<dyn ValueFn> = Arc::new(TimeShifted::new(u.clone(), c));
    for (label, cand, mode) in [("sub", &sub, Mode::Sub), ("super", &sup, Mode::Super)] {
        let r = martingale_test(cand, p, f, &probes, mode, &mc)?;
        rec.write(&format!("martingale_shift_{label}.csv"), r.to_csv().as_bytes())?;
        martingale_check(rec, &format!("shift_{label}_passes_{label}_mode"), &r, true);
        let r = martingale_test(cand, p, f, &probes, Mode::Exact, &mc)?;
        rec.write(&format!("martingale_shift_{label}_exact.csv"), r.to_csv().as_bytes())?;
        martingale_check(rec, &format!("shift_{label}_fails_exact_mode"), &r, false);
    }

    let s_nodes = if v.s_nodes.is_empty() { vec![n] } else { v.s_nodes.clone() };
    let points: Vec<(usize, DiscretePath)> = probes.iter().map(|q| (q.node, q.path.clone())).collect();
    let rows = mild_residual(&u, p, f, &points, &s_nodes, &mc)?;
    let mut csv = Csv::new(&["probe", "t", "s", "residual", "stderr", "z"]);
    for r in &rows {
        csv.row(&[r.probe.to_string(), num(r.t), num(r.s), num(r.estimate.mean), num(r.estimate.stderr), num(r.z)]);
    }
    rec.write("residual.csv", &csv.into_bytes())?;

    if v.comparison {
        let chain = [
            Arc::new(TimeShifted::new(u.clone(), -2.0 * c)) as Arc<dyn ValueFn>,
            sub.clone(),
            u.clone(),
            sup.clone(),
        ];
        // u - c(T - t) solves the equation recentered by c
        let equations = [f.recentered(c), f.clone(), f.clone()];
        let mut csv = Csv::new(&["link", "probe", "t", "gap", "expected", "tolerance"]);
        for (k, eq) in equations.iter().enumerate() {
            let r = comparison_test(&chain[k], &chain[k + 1], p, eq, &probes, &mc)?;
            let mut worst: f64 = 0.0;
            let mut within = true;
            for ((gap, tol), q) in r.gaps.iter().zip(&r.tolerances).zip(&probes) {
                let expected = c * (grid.horizon - grid.time(q.node));
                let d = (gap - expected).abs();
                worst = worst.max(d);
                within &= d <= tol.max(1e-12 * expected.abs().max(1.0));
                csv.row(&[k.to_string(), q.node.to_string(), num(grid.time(q.node)), num(*gap), num(expected), num(*tol)]);
            }
            rec.check(
                &format!("comparison_link_{k}"),
                r.holds() && within,
                worst,
                None,
                r.tolerances.iter().cloned().fold(f64::INFINITY, f64::min),
                format!("{:?}; max |gap - c(T-t)|", r.verdict),
            );
        }
        rec.write("comparison.csv", &csv.into_bytes())?;
    }

    if let Some(j) = &v.jets {
        let x = probes.first().map(|q| q.path.clone()).unwrap_or_else(|| p.initial.clone());
        let prefix = x.prefix(j.node)?;
        let boundary = -f.eval(j.node, &prefix, u.value(j.node, &prefix));
        let stop_cfg = StopConfig {
            n_train_paths: j.n_paths,
            n_eval_paths: j.n_paths,
            seed: derive_seed(seed, JET_TAG),
            features: cfg.features.clone(),
            ridge: cfg.ridge,
            noise: built.noise,
        };
        let mut csv = Csv::new(&[
            "kind", "offset", "alpha", "member", "gap", "gap_stderr", "residual", "inequality", "exact",
        ]);
        let mut bad = 0usize;
        for &off in &j.offsets {
            for kind in [JetKind::Sub, JetKind::Super] {
                let r = jet_probe(u.clone(), p, f, j.node, &x, boundary + off, j.h, kind, &stop_cfg)?;
                if r.inequality == Some(false) {
                    bad += 1;
                }
                csv.row(&[
                    format!("{kind:?}").to_lowercase(),
                    num(off),
                    num(r.alpha),
                    r.member.to_string(),
                    num(r.gap.mean),
                    num(r.gap.stderr),
                    num(r.residual),
                    r.inequality.map_or("na".into(), |b| b.to_string()),
                    r.exact.to_string(),
                ]);
            }
        }
        rec.write("jets.csv", &csv.into_bytes())?;
        rec.check(
            "jet_inequalities",
            bad == 0,
            bad as f64,
            None,
            0.0,
            "member slopes violating the jet inequality".into(),
        );
    }
    Ok(())
}

fn stop(sc: &Scenario, b: &StopBlock, cfg: &StopConfig, built: &Built, rec: &mut Recorder) -> Result<(), CliError> {
    let p = &built.problem;
    let phi = b.payoff.build(sc.model.dim_h, "stop.payoff")?;
    let s = b.horizon_node.unwrap_or(p.grid().n_steps);
    let x = &p.initial;
    let tree = if built.noise == NoiseKind::Bernoulli {
        match exact_tree_stop(&phi, p, b.node, x, s) {
            Ok(t) => Some(t),
            Err(ppde_core::Error::TreeTooLarge { .. }) => None,
            Err(e) => return Err(e.into()),
        }
    } else {
        None
    };
    if let Some(t) = &tree {
        let mut csv = Csv::new(&["node", "branch", "stop_value", "continuation_value", "value", "in_continuation"]);
        for nd in &t.nodes {
            csv.row(&[
                nd.node.to_string(),
                nd.branch.to_string(),
                num(nd.stop_value),
                num(nd.continuation_value),
                num(nd.value),
                nd.in_continuation.to_string(),
            ]);
        }
        rec.write("stop_tree.csv", &csv.into_bytes())?;
        rec.exact("tree_value", t.value);
    }
    let r = lsm_stop(&phi, p, b.node, x, s, cfg)?;
    let rule = serde_json::to_string_pretty(&r.rule).map_err(|e| CliError::Io(e.to_string()))?;
    rec.write("stop_rule.json", rule.as_bytes())?;
    rec.estimate("lsm_low", r.low);
    rec.estimate("lsm_high", r.high);
    rec.exact("immediate", r.immediate);
    if let Some(t) = &tree {
        let lo = r.low.mean - 3.0 * r.low.stderr;
        let hi = r.high.mean + 3.0 * r.high.stderr;
        rec.check(
            "lsm_brackets_tree",
            lo <= t.value && t.value <= hi,
            t.value,
            None,
            0.0,
            format!("[{lo}, {hi}]"),
        );
    }
    let reference = tree.as_ref().map_or(r.high.mean, |t| t.value);
    let scale = reference.abs().max(r.immediate.abs()).max(0.1);
    let rel = r.gap() / scale;
    rec.check(
        "lsm_relative_gap",
        rel < b.max_relative_gap,
        rel,
        Some(r.high.stderr.hypot(r.low.stderr) / scale),
        b.max_relative_gap,
        "(high - low) / scale".into(),
    );
    Ok(())
}

fn terminal(sc: &Scenario, b: &ControlBlock, built: &Built) -> Result<PathFunctional, CliError> {
    match &b.terminal {
        Some(t) => t.build(sc.model.dim_h, "control.terminal"),
        None => Ok(built.xi.clone()),
    }
}

fn control(
    sc: &Scenario,
    b: &ControlBlock,
    cp: &ControlledSdeProblem,
    cfg: &SearchConfig,
    built: &Built,
    seed: u64,
    rec: &mut Recorder,
) -> Result<(), CliError> {
    let ell: RunningCost = b.running_cost.build();
    let xi = terminal(sc, b, built)?;
    let v = value_function(cp, &ell, &xi, cp.start, &cp.initial, cfg)?;
    rec.estimate("value", v.estimate);
    rec.exact("policies_evaluated", v.evaluated as f64);
    rec.exact("exhaustive", if v.exhaustive { 1.0 } else { 0.0 });

    let mut policy = serde_json::json!({ "open_loop": v.policy });
    if let Some(fb) = &cfg.feedback {
        let fp = feedback_policy(cp, &ell, &xi, cp.start, &cp.initial, fb, cfg)?;
        let g = gain_estimate(
            cp,
            &ell,
            &xi,
            cp.start,
            &cp.initial,
            &fp.to_policy(),
            cfg.n_paths,
            derive_seed(seed, FEEDBACK_TAG),
            cfg.noise,
        )?;
        rec.estimate("feedback_value", g);
        policy["feedback"] = serde_json::to_value(&fp).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let text = serde_json::to_string_pretty(&policy).map_err(|e| CliError::Io(e.to_string()))?;
    rec.write("policy.json", text.as_bytes())?;

    if let Some(target) = b.expected_value {
        rec.check_near("expected_value", v.estimate, target, 3.0 * v.estimate.stderr);
    }

    if !b.dpp.is_empty() {
        let mut csv = Csv::new(&["probe", "node", "tau", "lhs", "rhs", "drift", "stderr", "z", "saturated", "pass"]);
        for (i, q) in b.dpp.iter().enumerate() {
            let x = sc.constant_path(&q.x, &format!("control.dpp[{i}].x"))?;
            let r = dpp_check(cp, &ell, &xi, q.node, &x, q.tau, cfg)?;
            csv.row(&[
                i.to_string(),
                q.node.to_string(),
                q.tau.to_string(),
                num(r.lhs.estimate.mean),
                num(r.rhs.mean),
                num(r.drift.mean),
                num(r.drift.stderr),
                num(r.z),
                r.saturated.to_string(),
                r.pass.map_or("na".into(), |b| b.to_string()),
            ]);
            let stderr = (r.drift.stderr > 0.0).then_some(r.drift.stderr);
            rec.check(
                &format!("dpp[{i}]"),
                r.pass == Some(true),
                r.drift.mean,
                stderr,
                3.0 * r.drift.stderr,
                format!("z {}, saturated {}", r.z, r.saturated),
            );
        }
        rec.write("dpp.csv", &csv.into_bytes())?;
    }

    if let Some(h) = &b.hjb {
        let probes = h
            .probes
            .iter()
            .enumerate()
            .map(|(i, q)| Ok((q.node, sc.constant_path(&q.x, &format!("control.hjb.probes[{i}].x"))?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        let r = hjb_viscosity_check(cp, &ell, &xi, &probes, h.h, cfg)?;
        let mut csv = Csv::new(&["probe", "t", "h", "action", "drift", "stderr", "best_action", "supersolution", "subsolution"]);
        for (i, row) in r.rows.iter().enumerate() {
            for (a, d) in row.drifts.iter().enumerate() {
                csv.row(&[
                    i.to_string(),
                    num(row.t),
                    num(row.h),
                    cp.actions[a].label.clone(),
                    num(d.mean),
                    num(d.stderr),
                    cp.actions[row.best_action].label.clone(),
                    row.supersolution.to_string(),
                    row.subsolution.to_string(),
                ]);
            }
        }
        rec.write("hjb.csv", &csv.into_bytes())?;
        let failing = r.rows.iter().filter(|row| !(row.supersolution && row.subsolution)).count();
        rec.check(
            "hjb_viscosity",
            failing == 0,
            failing as f64,
            None,
            0.0,
            format!("probes failing at z {:.3}", r.threshold),
        );
        if let Some(s) = &r.structure {
            rec.exact("structure_max_discrepancy", s.max_discrepancy);
            rec.check(
                "structure_condition",
                s.consistent,
                s.max_discrepancy,
                None,
                0.0,
                "b(t,x,a) - b(t,x,a0) = sigma b0".into(),
            );
        }
    }
    Ok(())
}

/// Re-runs the scenario embedded in `<dir>/report.json` and compares every
/// artifact byte for byte and every check and result value.
pub fn replay(dir: &Path, seed: Option<u64>) -> Result<String, CliError> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let stored: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("report.json: {e}")))?;
    let field = |k: &str| stored.get(k).ok_or_else(|| CliError::schema("report.json", format!("missing `{k}`")));
    let stage = field("subcommand")?
        .as_str()
        .and_then(Stage::parse)
        .ok_or_else(|| CliError::schema("report.json.subcommand", "unknown subcommand"))?;
    let stored_seed = field("seed")?
        .as_u64()
        .ok_or_else(|| CliError::schema("report.json.seed", "not an unsigned integer"))?;
    let scenario: Scenario = serde_json::from_value(field("scenario")?.clone())
        .map_err(|e| CliError::schema("report.json.scenario", e.to_string()))?;

    let tmp = dir.join(".replay");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    let fresh = run_scenario(scenario, stage, Some(seed.unwrap_or(stored_seed)), &tmp)?;

    let artifacts = field("artifacts")?
        .as_array()
        .ok_or_else(|| CliError::schema("report.json.artifacts", "not an array"))?;
    if artifacts.len() != fresh.artifacts.len() {
        return Err(CliError::Mismatch(format!(
            "artifact count {} vs {}",
            artifacts.len(),
            fresh.artifacts.len()
        )));
    }
    for a in artifacts {
        let file = a.get("file").and_then(|f| f.as_str()).unwrap_or_default();
        let old = std::fs::read(dir.join(file)).map_err(|e| CliError::Io(format!("{file}: {e}")))?;
        let new = std::fs::read(tmp.join(file)).map_err(|_| CliError::Mismatch(format!("{file} not produced")))?;
        if old != new {
            return Err(CliError::Mismatch(format!("{file} differs")));
        }
    }
    for key in ["checks", "results"] {
        let new = match key {
            "checks" => serde_json::to_value(&fresh.checks),
            _ => serde_json::to_value(&fresh.results),
        }
        .map_err(|e| CliError::Io(e.to_string()))?;
        let old = field(key)?;
        if *old != new {
            let (a, b) = (old.as_array(), new.as_array());
            let first = a
                .zip(b)
                .and_then(|(a, b)| a.iter().zip(b).find(|(x, y)| x != y))
                .and_then(|(x, _)| x.get("name").and_then(|n| n.as_str()).map(str::to_string))
                .unwrap_or_else(|| "length".into());
            return Err(CliError::Mismatch(format!("report.json {key} differ at `{first}`")));
        }
    }
    std::fs::remove_dir_all(&tmp)?;
    Ok(format!(
        "replay identical: {} artifacts, {} checks, {} results",
        fresh.artifacts.len(),
        fresh.checks.len(),
        fresh.results.len()
    ))
}
