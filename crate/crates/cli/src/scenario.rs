//! Scenario schema and its translation into core objects.

use serde::{Deserialize, Serialize};

use ppde_core::coeffs::{
    ControlledDiffusion, ControlledDrift, Diffusion, Drift, Nonlinearity, PathFunctional, RunningCost,
};
use ppde_core::control::{FeedbackConfig, SearchConfig};
use ppde_core::noise::NoiseKind;
use ppde_core::path::{DiscretePath, Grid};
use ppde_core::ppde::SolverConfig;
use ppde_core::regression::{Feature, FeatureMap, DEFAULT_RIDGE};
use ppde_core::sde::{Action, ControlledSdeProblem, SdeProblem};
use ppde_core::spectral::SpectralModel;
use ppde_core::stopping::StopConfig;

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelBlock,
    pub coefficients: CoefficientsBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<VerificationBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub dim_h: usize,
    pub dim_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalues: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eigenvalue_rule: Option<EigenvalueRule>,
    pub gamma: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n_steps: usize,
    /// `M`, the Lipschitz constant of the drift.
    pub lip_b: f64,
    pub lip_sigma: f64,
    /// Constant initial path.
    pub initial: Vec<f64>,
    #[serde(default)]
    pub start_node: usize,
    #[serde(default)]
    pub noise: NoiseKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum EigenvalueRule {
    /// `λ_k = -scale k²`.
    Heat { scale: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsBlock {
    #[serde(default = "DriftSpec::zero")]
    pub drift: DriftSpec,
    pub diffusion: DiffusionSpec,
    #[serde(default = "NonlinearitySpec::zero")]
    pub nonlinearity: NonlinearitySpec,
    pub terminal: FunctionalSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSpec {
    Zero,
    Constant { mu: Vec<f64> },
    Affine { coef: f64, offset: Vec<f64> },
    RunningIntegral { coef: f64 },
    RunningSup { coef: f64 },
}

impl DriftSpec {
    fn zero() -> Self {
        Self::Zero
    }

    fn build(&self, dim_h: usize, field: &str) -> Result<Drift, CliError> {
        let check_len = |v: &Vec<f64>, name: &str| {
            if v.len() != dim_h {
                return Err(CliError::schema(
                    format!("{field}.{name}"),
                    format!("expected {dim_h} entries, found {}", v.len()),
                ));
            }
            Ok(())
        };
        Ok(match self {
            Self::Zero => Drift::zero(),
            Self::Constant { mu } => {
                check_len(mu, "mu")?;
                Drift::constant(mu.clone())
            }
            Self::Affine { coef, offset } => {
                check_len(offset, "offset")?;
                Drift::affine(*coef, offset.clone())
            }
            Self::RunningIntegral { coef } => Drift::running_integral(*coef),
            Self::RunningSup { coef } => Drift::running_sup(*coef),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiffusionSpec {
    Zero,
    Diagonal { diag: Vec<f64> },
}

impl DiffusionSpec {
    fn build(&self, dim_h: usize, dim_k: usize) -> Result<Diffusion, CliError> {
        Ok(match self {
            Self::Zero => Diffusion::zero(dim_h, dim_k),
            Self::Diagonal { diag } => {
                if diag.len() != dim_h.min(dim_k) {
                    return Err(CliError::schema(
                        "coefficients.diffusion.diag",
                        format!("expected {} entries, found {}", dim_h.min(dim_k), diag.len()),
                    ));
                }
                Diffusion::diagonal(dim_h, dim_k, diag.clone())
            }
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearitySpec {
    Zero,
    Constant {
        c: f64,
    },
    LinearY {
        slope: f64,
        #[serde(default)]
        c: f64,
        #[serde(default)]
        x_coef: f64,
    },
    Saturating {
        lip: f64,
        scale: f64,
        #[serde(default)]
        c: f64,
    },
}

impl NonlinearitySpec {
    fn zero() -> Self {
        Self::Zero
    }

    pub fn build(&self) -> Result<Nonlinearity, CliError> {
        let field = "coefficients.nonlinearity";
        Ok(match self {
            Self::Zero => Nonlinearity::zero(),
            Self::Constant { c } => Nonlinearity::constant(*c),
            Self::LinearY { slope, c, x_coef } => Nonlinearity::linear_y(*slope, *c, *x_coef),
            Self::Saturating { lip, scale, c } => {
                if !(*lip > 0.0) {
                    return Err(CliError::schema(format!("{field}.lip"), "must be positive"));
                }
                if !(*scale > 0.0) {
                    return Err(CliError::schema(format!("{field}.scale"), "must be positive"));
                }
                Nonlinearity::saturating(*lip, *scale, *c)
            }
        })
    }

}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionalSpec {
    Constant { c: f64 },
    Endpoint { weights: Vec<f64> },
    Integral { mode: usize },
    SupNorm,
}

impl FunctionalSpec {
    pub fn build(&self, dim_h: usize, field: &str) -> Result<PathFunctional, CliError> {
        Ok(match self {
            Self::Constant { c } => PathFunctional::constant(*c),
            Self::Endpoint { weights } => {
                if weights.len() != dim_h {
                    return Err(CliError::schema(
                        format!("{field}.weights"),
                        format!("expected {dim_h} entries, found {}", weights.len()),
                    ));
                }
                PathFunctional::endpoint(weights.clone())
            }
            Self::Integral { mode } => {
                if *mode >= dim_h {
                    return Err(CliError::schema(format!("{field}.mode"), format!("mode {mode} >= dim_h {dim_h}")));
                }
                PathFunctional::integral(*mode)
            }
            Self::SupNorm => PathFunctional::sup_norm(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeaturesSpec {
    Named(String),
    List(Vec<String>),
}

impl FeaturesSpec {
    fn build(&self, dim_h: usize, field: &str) -> Result<FeatureMap, CliError> {
        let map = match self {
            Self::Named(s) if s == "standard" => FeatureMap::standard(dim_h),
            Self::Named(s) if s == "constant" => FeatureMap::constant_only(),
            Self::Named(s) => {
                return Err(CliError::schema(field, format!("unknown feature set `{s}` (standard, constant or a list)")))
            }
            Self::List(names) => FeatureMap::new(
                names
                    .iter()
                    .map(|n| Feature::parse(n).ok_or_else(|| CliError::schema(field, format!("unknown feature `{n}`"))))
                    .collect::<Result<_, _>>()?,
            ),
        };
        map.validate(dim_h).map_err(|e| CliError::schema(field, e.to_string()))?;
        Ok(map)
    }
}

fn standard_features() -> FeaturesSpec {
    FeaturesSpec::Named("standard".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateBlock {
    pub n_paths: usize,
    #[serde(default)]
    pub moments: Vec<f64>,
    /// Restart times for the flow check.
    #[serde(default)]
    pub flow_times: Vec<f64>,
    #[serde(default = "default_flow_paths")]
    pub flow_paths: usize,
    /// Compare the terminal mean and variance with the closed-form OU moments.
    #[serde(default)]
    pub ou_oracle: bool,
}

fn default_flow_paths() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default = "default_safety")]
    pub window_safety: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_picard_iters: usize,
    #[serde(default = "default_train")]
    pub n_train_paths: usize,
    #[serde(default = "standard_features")]
    pub features: FeaturesSpec,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Typical-path probes at which the solution is tabulated.
    #[serde(default = "default_solution_probes")]
    pub n_probes: usize,
    /// Margin added to the contraction bound when checking Picard ratios.
    #[serde(default = "default_margin")]
    pub contraction_margin: f64,
    #[serde(default)]
    pub bsde: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<SolverOracle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverOracle {
    /// `u(t, x) = e^{rate (T - t)}` (for `F = rate · y`, `ξ ≡ 1`).
    Exponential {
        rate: f64,
        #[serde(default = "default_rel_tol")]
        rel_tol: f64,
    },
}

fn default_safety() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-10
}
fn default_max_iters() -> usize {
    100
}
fn default_train() -> usize {
    4000
}
fn default_ridge() -> f64 {
    DEFAULT_RIDGE
}
fn default_solution_probes() -> usize {
    8
}
fn default_margin() -> f64 {
    0.05
}
fn default_rel_tol() -> f64 {
    0.01
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationBlock {
    #[serde(default = "default_probes")]
    pub n_probes: usize,
    #[serde(default = "default_mc_paths")]
    pub n_paths: usize,
    /// `c` in the shifted candidates `u ± c (T - t)`.
    #[serde(default = "default_shift")]
    pub shift_c: f64,
    /// Later nodes `s` for the residual table (default: the horizon).
    #[serde(default)]
    pub s_nodes: Vec<usize>,
    #[serde(default = "yes")]
    pub comparison: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jets: Option<JetBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JetBlock {
    pub node: usize,
    pub h: usize,
    /// Offsets from the boundary slope `-F(t, x, u(t, x))`.
    pub offsets: Vec<f64>,
    #[serde(default = "default_mc_paths")]
    pub n_paths: usize,
}

fn default_probes() -> usize {
    20
}
fn default_mc_paths() -> usize {
    4000
}
fn default_shift() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopBlock {
    pub payoff: FunctionalSpec,
    #[serde(default)]
    pub node: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_node: Option<usize>,
    #[serde(default = "standard_features")]
    pub features: FeaturesSpec,
    #[serde(default = "default_train")]
    pub n_train_paths: usize,
    #[serde(default = "default_mc_paths")]
    pub n_eval_paths: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    #[serde(default = "default_gap")]
    pub max_relative_gap: f64,
}

fn default_gap() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    pub actions: Vec<Action>,
    pub drift: ControlledDriftSpec,
    #[serde(default = "RunningCostSpec::zero")]
    pub running_cost: RunningCostSpec,
    /// Defaults to the coefficients' terminal condition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<FunctionalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure_condition: Option<StructureSpec>,
    #[serde(default)]
    pub search: SearchSpec,
    /// Exact value at the initial datum, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_value: Option<f64>,
    #[serde(default)]
    pub dpp: Vec<DppProbe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbBlock>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlledDriftSpec {
    /// `b(t, x) + scale · a · e_mode`.
    ActionShift {
        #[serde(default = "DriftSpec::zero")]
        base: DriftSpec,
        mode: usize,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ControlledDriftSpec {
    fn build(&self, dim: usize, field: &str) -> Result<ControlledDrift, CliError> {
        match self {
            Self::ActionShift { base, mode, scale } => {
                if *mode >= dim {
                    return Err(CliError::schema(format!("{field}.mode"), format!("mode {mode} >= dimension {dim}")));
                }
                let b = base.build(dim, &format!("{field}.base"))?;
                let (mode, scale) = (*mode, *scale);
                Ok(ControlledDrift::new(move |j, x, a, out| {
                    b.eval(j, x, out);
                    out[mode] += scale * a;
                }))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    /// `b̄₀`, valued in the noise space.
    pub b0: ControlledDriftSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunningCostSpec {
    Zero,
    /// `ℓ = -kappa |a|`.
    ActionCost { kappa: f64 },
}

impl RunningCostSpec {
    fn zero() -> Self {
        Self::Zero
    }

    pub fn build(&self) -> RunningCost {
        match self {
            Self::Zero => RunningCost::zero(),
            Self::ActionCost { kappa } => RunningCost::action_cost(*kappa),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpec {
    #[serde(default = "default_cap")]
    pub exhaustive_cap: u64,
    #[serde(default = "default_search_paths")]
    pub n_paths: usize,
    #[serde(default = "default_outer")]
    pub n_outer_paths: usize,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackSpec>,
}

impl Default for SearchSpec {
    fn default() -> Self {
        Self {
            exhaustive_cap: default_cap(),
            n_paths: default_search_paths(),
            n_outer_paths: default_outer(),
            max_sweeps: default_sweeps(),
            feedback: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSpec {
    #[serde(default = "standard_features")]
    pub features: FeaturesSpec,
    #[serde(default = "default_train")]
    pub n_train_paths: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_cap() -> u64 {
    4096
}
fn default_search_paths() -> usize {
    2000
}
fn default_outer() -> usize {
    400
}
fn default_sweeps() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DppProbe {
    pub node: usize,
    pub tau: usize,
    /// Constant path value.
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbBlock {
    #[serde(default = "one_step")]
    pub h: usize,
    pub probes: Vec<HjbProbe>,
}

fn one_step() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbProbe {
    pub node: usize,
    pub x: Vec<f64>,
}

/// Core objects built from a validated scenario.
pub struct Built {
    pub problem: SdeProblem,
    pub f: Nonlinearity,
    pub xi: PathFunctional,
    pub noise: NoiseKind,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Schema(format!("config: {e}")))
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        Grid::new(self.model.n_steps, self.model.horizon).map_err(|e| CliError::schema("model", e.to_string()))
    }

    fn spectral(&self) -> Result<SpectralModel, CliError> {
        let m = &self.model;
        let eig = match (&m.eigenvalues, &m.eigenvalue_rule) {
            (Some(e), None) => {
                if e.len() != m.dim_h {
                    return Err(CliError::schema(
                        "model.eigenvalues",
                        format!("expected {} entries, found {}", m.dim_h, e.len()),
                    ));
                }
                e.clone()
            }
            (None, Some(EigenvalueRule::Heat { scale })) => (1..=m.dim_h).map(|k| -scale * (k * k) as f64).collect(),
            (Some(_), Some(_)) => {
                return Err(CliError::schema("model", "give either `eigenvalues` or `eigenvalue_rule`, not both"))
            }
            (None, None) => return Err(CliError::schema("model", "missing `eigenvalues` or `eigenvalue_rule`")),
        };
        SpectralModel::new(m.dim_k, eig, m.gamma, m.lip_b, m.lip_sigma, m.horizon).map_err(|e| match e {
            ppde_core::Error::InvalidParameter { name, reason } => CliError::schema(format!("model.{name}"), reason),
            other => CliError::schema("model", other.to_string()),
        })
    }

    fn initial(&self, grid: Grid) -> Result<DiscretePath, CliError> {
        if self.model.initial.len() != self.model.dim_h {
            return Err(CliError::schema(
                "model.initial",
                format!("expected {} entries, found {}", self.model.dim_h, self.model.initial.len()),
            ));
        }
        Ok(DiscretePath::constant(grid, &self.model.initial))
    }

    pub fn build(&self) -> Result<Built, CliError> {
        let model = self.spectral()?;
        let grid = self.grid()?;
        let c = &self.coefficients;
        let drift = c.drift.build(self.model.dim_h, "coefficients.drift")?;
        let diffusion = c.diffusion.build(self.model.dim_h, self.model.dim_k)?;
        let problem = SdeProblem::new(model, drift, diffusion, self.initial(grid)?, self.model.start_node)
            .map_err(|e| CliError::schema("model", e.to_string()))?;
        Ok(Built {
            problem,
            f: c.nonlinearity.build()?,
            xi: c.terminal.build(self.model.dim_h, "coefficients.terminal")?,
            noise: self.model.noise,
        })
    }

    pub fn solver_config(&self, block: &SolverBlock, seed: u64) -> Result<SolverConfig, CliError> {
        if !(block.window_safety > 0.0 && block.window_safety < 1.0) {
            return Err(CliError::schema("solver.window_safety", "must lie in (0, 1)"));
        }
        Ok(SolverConfig {
            window_safety: block.window_safety,
            tol: block.tol,
            max_picard_iters: block.max_picard_iters,
            n_train_paths: block.n_train_paths,
            features: block.features.build(self.model.dim_h, "solver.features")?,
            ridge: block.ridge,
            seed,
            noise: self.model.noise,
        })
    }

    pub fn stop_config(&self, block: &StopBlock, seed: u64) -> Result<StopConfig, CliError> {
        Ok(StopConfig {
            n_train_paths: block.n_train_paths,
            n_eval_paths: block.n_eval_paths,
            seed,
            features: block.features.build(self.model.dim_h, "stop.features")?,
            ridge: block.ridge,
            noise: self.model.noise,
        })
    }

    pub fn controlled(&self, block: &ControlBlock) -> Result<ControlledSdeProblem, CliError> {
        let built = self.build()?;
        let p = built.problem;
        if block.actions.is_empty() {
            return Err(CliError::schema("control.actions", "at least one action is required"));
        }
        let drift = block.drift.build(self.model.dim_h, "control.drift")?;
        let mut cp = ControlledSdeProblem::new(
            p.model.clone(),
            drift,
            ControlledDiffusion::Uncontrolled(p.diffusion.clone()),
            block.actions.clone(),
            p.initial.clone(),
            p.start,
        )
        .map_err(|e| CliError::schema("control", e.to_string()))?;
        if let Some(sc) = &block.structure_condition {
            cp = cp.with_structure(sc.b0.build(self.model.dim_k, "control.structure_condition.b0")?);
        }
        Ok(cp)
    }

    pub fn search_config(&self, block: &ControlBlock, seed: u64) -> Result<SearchConfig, CliError> {
        let s = &block.search;
        let feedback = match &s.feedback {
            Some(fb) => Some(FeedbackConfig {
                features: fb.features.build(self.model.dim_h, "control.search.feedback.features")?,
                n_train_paths: fb.n_train_paths,
                ridge: fb.ridge,
            }),
            None => None,
        };
        Ok(SearchConfig {
            exhaustive_cap: s.exhaustive_cap,
            n_paths: s.n_paths,
            n_outer_paths: s.n_outer_paths,
            max_sweeps: s.max_sweeps,
            seed,
            noise: self.model.noise,
            feedback,
        })
    }

    /// Constant path at `x` on the scenario grid.
    pub fn constant_path(&self, x: &[f64], field: &str) -> Result<DiscretePath, CliError> {
        if x.len() != self.model.dim_h {
            return Err(CliError::schema(field, format!("expected {} entries, found {}", self.model.dim_h, x.len())));
        }
        Ok(DiscretePath::constant(self.grid()?, x))
    }
}
