//! Coefficient functionals on the path space and the builtin library.
//!
//! Every functional is evaluated on a [`PathPrefix`], the path restricted to
//! the nodes up to the evaluation time. Non-anticipativity is therefore a
//! property of the types: no evaluator ever sees the future of a path.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::path::{DiscretePath, PathPrefix};
use crate::spectral::{norm, OperatorMatrix};

type DriftFn = dyn Fn(usize, &PathPrefix<'_>, &mut [f64]) + Send + Sync;
type ScalarFn = dyn Fn(usize, &PathPrefix<'_>) -> f64 + Send + Sync;
type YFn = dyn Fn(usize, &PathPrefix<'_>, f64) -> f64 + Send + Sync;
type MatrixFn = dyn Fn(usize, &PathPrefix<'_>) -> OperatorMatrix + Send + Sync;
type ActionDriftFn = dyn Fn(usize, &PathPrefix<'_>, f64, &mut [f64]) + Send + Sync;
type ActionMatrixFn = dyn Fn(usize, &PathPrefix<'_>, f64) -> OperatorMatrix + Send + Sync;

/// `H`-valued drift `b(t, x)`.
#[derive(Clone)]
pub struct Drift(Arc<DriftFn>);

impl fmt::Debug for Drift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Drift(..)")
    }
}

impl Drift {
    pub fn new(f: impl Fn(usize, &PathPrefix<'_>, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    /// Writes `b(t_node, x)` into `out` (overwriting it).
    pub fn eval(&self, node: usize, x: &PathPrefix<'_>, out: &mut [f64]) {
        (self.0)(node, x, out)
    }

    pub fn zero() -> Self {
        Self::new(|_, _, out| out.fill(0.0))
    }

    pub fn constant(mu: Vec<f64>) -> Self {
        Self::new(move |_, _, out| out.copy_from_slice(&mu))
    }

    /// `b(t,x) = coef * x_t + offset`.
    pub fn affine(coef: f64, offset: Vec<f64>) -> Self {
        Self::new(move |_, x, out| {
            for ((o, xv), c) in out.iter_mut().zip(x.current()).zip(&offset) {
                *o = coef * xv + c;
            }
        })
    }

    /// `b_k(t,x) = coef * ∫_0^t x_{s,k} ds`.
    pub fn running_integral(coef: f64) -> Self {
        Self::new(move |_, x, out| {
            for (k, o) in out.iter_mut().enumerate() {
                *o = coef * x.running_integral(k);
            }
        })
    }

    /// `b_k(t,x) = coef * sup_{s≤t} |x_s|` in every mode.
    pub fn running_sup(coef: f64) -> Self {
        Self::new(move |_, x, out| out.fill(coef * x.running_sup_norm()))
    }

    /// `b + c e_mode`.
    pub fn shifted(&self, mode: usize, c: f64) -> Self {
        let inner = self.clone();
        Self::new(move |j, x, out| {
            inner.eval(j, x, out);
            out[mode] += c;
        })
    }
}

/// Diffusion `σ(t, x) ∈ L(K; H)`.
#[derive(Clone)]
pub enum Diffusion {
    Zero { dim_h: usize, dim_k: usize },
    /// State-independent rectangular diagonal.
    Diagonal {
        dim_h: usize,
        dim_k: usize,
        diag: Vec<f64>,
    },
    Functional(Arc<MatrixFn>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero { dim_h, dim_k } => write!(f, "Zero({dim_h}x{dim_k})"),
            Self::Diagonal { diag, .. } => write!(f, "Diagonal({diag:?})"),
            Self::Functional(_) => f.write_str("Functional(..)"),
        }
    }
}

impl Diffusion {
    pub fn zero(dim_h: usize, dim_k: usize) -> Self {
        Self::Zero { dim_h, dim_k }
    }

    pub fn diagonal(dim_h: usize, dim_k: usize, diag: Vec<f64>) -> Self {
        Self::Diagonal { dim_h, dim_k, diag }
    }

    pub fn functional(
        f: impl Fn(usize, &PathPrefix<'_>) -> OperatorMatrix + Send + Sync + 'static,
    ) -> Self {
        Self::Functional(Arc::new(f))
    }

    pub fn matrix(&self, node: usize, x: &PathPrefix<'_>) -> OperatorMatrix {
        match self {
            Self::Zero { dim_h, dim_k } => OperatorMatrix::zeros(*dim_h, *dim_k),
            Self::Diagonal { dim_h, dim_k, diag } => OperatorMatrix::diagonal(*dim_h, *dim_k, diag),
            Self::Functional(f) => f(node, x),
        }
    }

    /// `out += σ(t, x) dw`.
    pub fn apply_add(&self, node: usize, x: &PathPrefix<'_>, dw: &[f64], out: &mut [f64]) {
        match self {
            Self::Zero { .. } => {}
            Self::Diagonal { diag, .. } => {
                for ((o, d), w) in out.iter_mut().zip(diag).zip(dw) {
                    *o += d * w;
                }
            }
            Self::Functional(f) => f(node, x).apply_add(dw, out),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Zero { .. } => true,
            Self::Diagonal { diag, .. } => diag.iter().all(|d| *d == 0.0),
            Self::Functional(_) => false,
        }
    }
}

/// Real-valued non-anticipative functional, e.g. a terminal condition `ξ`
/// (evaluated at the last node), a payoff `φ`, or `F` that ignores `y`.
#[derive(Clone)]
pub struct PathFunctional(Arc<ScalarFn>);

impl fmt::Debug for PathFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("PathFunctional(..)")
    }
}

impl PathFunctional {
    pub fn new(f: impl Fn(usize, &PathPrefix<'_>) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn eval(&self, node: usize, x: &PathPrefix<'_>) -> f64 {
        (self.0)(node, x)
    }

    /// Evaluate on a whole path, stopping it at `node` first.
    pub fn eval_path(&self, node: usize, x: &DiscretePath) -> f64 {
        self.eval(node, &x.prefix_unchecked(node))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c)
    }

    /// `Σ_k w_k x_{t,k}`.
    pub fn endpoint(weights: Vec<f64>) -> Self {
        Self::new(move |_, x| x.current().iter().zip(&weights).map(|(a, b)| a * b).sum())
    }

    /// `∫_0^t x_{s,mode} ds`.
    pub fn integral(mode: usize) -> Self {
        Self::new(move |_, x| x.running_integral(mode))
    }

    /// `sup_{s≤t} |x_s|`.
    pub fn sup_norm() -> Self {
        Self::new(|_, x| x.running_sup_norm())
    }

    /// `c * t`, the affine-in-time test function.
    pub fn time_linear(c: f64) -> Self {
        Self::new(move |_, x| c * x.time())
    }

    pub fn plus(&self, other: &PathFunctional) -> Self {
        let (a, b) = (self.clone(), other.clone());
        Self::new(move |j, x| a.eval(j, x) + b.eval(j, x))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let a = self.clone();
        Self::new(move |j, x| c * a.eval(j, x))
    }
}

/// Constants attached to a nonlinearity `F(t, x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonlinearityConstants {
    /// Growth constant `L`.
    pub growth: f64,
    /// Lipschitz constant in `y`, `L̂`.
    pub lipschitz: f64,
    /// Growth exponent `p`.
    pub exponent: f64,
}

/// The PPDE nonlinearity `F(t, x, y)`.
#[derive(Clone)]
pub struct Nonlinearity {
    f: Arc<YFn>,
    pub constants: NonlinearityConstants,
    /// False when `F` ignores `y`, so one Monte Carlo pass solves the problem.
    pub reads_y: bool,
}

impl fmt::Debug for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Nonlinearity")
            .field("constants", &self.constants)
            .field("reads_y", &self.reads_y)
            .finish()
    }
}

impl Nonlinearity {
    pub fn new(
        f: impl Fn(usize, &PathPrefix<'_>, f64) -> f64 + Send + Sync + 'static,
        constants: NonlinearityConstants,
    ) -> Self {
        Self {
            f: Arc::new(f),
            constants,
            reads_y: true,
        }
    }

    pub fn eval(&self, node: usize, x: &PathPrefix<'_>, y: f64) -> f64 {
        (self.f)(node, x, y)
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        Self {
            f: Arc::new(move |_, _, _| c),
            constants: NonlinearityConstants {
                growth: c.abs().max(f64::MIN_POSITIVE),
                lipschitz: 0.0,
                exponent: 0.0,
            },
            reads_y: false,
        }
    }

    /// `F` that ignores `y`.
    pub fn from_functional(g: PathFunctional, growth: f64, exponent: f64) -> Self {
        Self {
            f: Arc::new(move |j, x, _| g.eval(j, x)),
            constants: NonlinearityConstants {
                growth,
                lipschitz: 0.0,
                exponent,
            },
            reads_y: false,
        }
    }

    /// `F(t,x,y) = slope * y + c + x_coef * x_{t,1}`.
    pub fn linear_y(slope: f64, c: f64, x_coef: f64) -> Self {
        let growth = slope.abs().max(c.abs()).max(x_coef.abs()).max(f64::MIN_POSITIVE);
        Self {
            f: Arc::new(move |_, x, y| slope * y + c + x_coef * x.current()[0]),
            constants: NonlinearityConstants {
                growth,
                lipschitz: slope.abs(),
                exponent: 1.0,
            },
            reads_y: slope != 0.0,
        }
    }

    /// `F(t,x,y) = lip * scale * tanh(y / scale) + c`, Lipschitz in `y` with constant `lip`.
    pub fn saturating(lip: f64, scale: f64, c: f64) -> Self {
        Self {
            f: Arc::new(move |_, _, y| lip * scale * (y / scale).tanh() + c),
            constants: NonlinearityConstants {
                growth: (lip * scale).abs() + c.abs(),
                lipschitz: lip.abs(),
                exponent: 0.0,
            },
            reads_y: lip != 0.0,
        }
    }

    /// `F + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let inner = self.f.clone();
        let mut constants = self.constants;
        constants.growth += c.abs();
        Self {
            f: Arc::new(move |j, x, y| inner(j, x, y) + c),
            constants,
            reads_y: self.reads_y,
        }
    }

    /// `F(t, x, y + c(T - t)) - c`: the nonlinearity solved by `u - c(T - t)`
    /// when `u` solves the equation with `F`.
    pub fn recentered(&self, c: f64) -> Self {
        let inner = self.f.clone();
        let mut constants = self.constants;
        constants.growth += c.abs();
        Self {
            f: Arc::new(move |j, x, y| inner(j, x, y + c * (x.grid().horizon - x.time())) - c),
            constants,
            reads_y: self.reads_y,
        }
    }

    /// `F̃(t,x,y) = -F(t,x,-y)`: the nonlinearity solved by `-u`.
    pub fn mirrored(&self) -> Self {
        let inner = self.f.clone();
        Self {
            f: Arc::new(move |j, x, y| -inner(j, x, -y)),
            constants: self.constants,
            reads_y: self.reads_y,
        }
    }

    /// Spot-check the Lipschitz and growth bounds on probe triples.
    pub fn check_constants(&self, probes: &[(usize, DiscretePath, f64, f64)]) -> ConstantsReport {
        let c = self.constants;
        let mut lip_violations = 0;
        let mut growth_violations = 0;
        let mut worst_lip = 0.0f64;
        for (node, path, y, y2) in probes {
            let x = path.prefix_unchecked(*node);
            let a = self.eval(*node, &x, *y);
            let b = self.eval(*node, &x, *y2);
            if y != y2 {
                let ratio = (a - b).abs() / (y - y2).abs();
                worst_lip = worst_lip.max(ratio);
                if ratio > c.lipschitz * (1.0 + 1e-12) + 1e-15 {
                    lip_violations += 1;
                }
            }
            let sup = x.running_sup_norm();
            let bound = c.growth * (1.0 + sup.powf(c.exponent) + y.abs());
            if a.abs() > bound * (1.0 + 1e-12) {
                growth_violations += 1;
            }
        }
        ConstantsReport {
            probes: probes.len(),
            lipschitz_violations: lip_violations,
            growth_violations,
            worst_lipschitz_ratio: worst_lip,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantsReport {
    pub probes: usize,
    pub lipschitz_violations: usize,
    pub growth_violations: usize,
    pub worst_lipschitz_ratio: f64,
}

impl ConstantsReport {
    pub fn passed(&self) -> bool {
        self.lipschitz_violations == 0 && self.growth_violations == 0
    }
}

/// Controlled drift `b̄(t, x, a)`, `a` being the numeric payload of an action.
#[derive(Clone)]
pub struct ControlledDrift(Arc<ActionDriftFn>);

impl fmt::Debug for ControlledDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ControlledDrift(..)")
    }
}

impl ControlledDrift {
    pub fn new(
        f: impl Fn(usize, &PathPrefix<'_>, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self(Arc::new(f))
    }

    pub fn eval(&self, node: usize, x: &PathPrefix<'_>, a: f64, out: &mut [f64]) {
        (self.0)(node, x, a, out)
    }

    /// The action is ignored.
    pub fn uncontrolled(b: Drift) -> Self {
        Self::new(move |j, x, _, out| b.eval(j, x, out))
    }

    /// `b̄(t,x,a) = b(t,x) + a e_mode`.
    pub fn action_shift(b: Drift, mode: usize) -> Self {
        Self::new(move |j, x, a, out| {
            b.eval(j, x, out);
            out[mode] += a;
        })
    }
}

/// Controlled diffusion `σ̄(t, x, a)`.
#[derive(Clone)]
pub enum ControlledDiffusion {
    Uncontrolled(Diffusion),
    Functional(Arc<ActionMatrixFn>),
}

impl fmt::Debug for ControlledDiffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uncontrolled(d) => write!(f, "Uncontrolled({d:?})"),
            Self::Functional(_) => f.write_str("Functional(..)"),
        }
    }
}

impl ControlledDiffusion {
    pub fn matrix(&self, node: usize, x: &PathPrefix<'_>, a: f64) -> OperatorMatrix {
        match self {
            Self::Uncontrolled(d) => d.matrix(node, x),
            Self::Functional(f) => f(node, x, a),
        }
    }

    pub fn apply_add(&self, node: usize, x: &PathPrefix<'_>, a: f64, dw: &[f64], out: &mut [f64]) {
        match self {
            Self::Uncontrolled(d) => d.apply_add(node, x, dw, out),
            Self::Functional(f) => f(node, x, a).apply_add(dw, out),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Uncontrolled(d) if d.is_zero())
    }
}

/// Running gain `ℓ(t, x, a)`.
#[derive(Clone)]
pub struct RunningCost {
    f: Arc<YFn>,
    /// Growth constant `N`.
    pub growth: f64,
    pub exponent: f64,
}

impl fmt::Debug for RunningCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunningCost")
            .field("growth", &self.growth)
            .field("exponent", &self.exponent)
            .finish()
    }
}

impl RunningCost {
    pub fn new(
        f: impl Fn(usize, &PathPrefix<'_>, f64) -> f64 + Send + Sync + 'static,
        growth: f64,
        exponent: f64,
    ) -> Self {
        Self {
            f: Arc::new(f),
            growth,
            exponent,
        }
    }

    pub fn eval(&self, node: usize, x: &PathPrefix<'_>, a: f64) -> f64 {
        (self.f)(node, x, a)
    }

    pub fn zero() -> Self {
        Self::new(|_, _, _| 0.0, 0.0, 0.0)
    }

    /// `ℓ = -κ |a|`.
    pub fn action_cost(kappa: f64) -> Self {
        Self::new(move |_, _, a| -kappa * a.abs(), kappa.abs(), 0.0)
    }

    /// Count probes where `|ℓ(t,x,a)| > N (1 + |x|_∞^p)`.
    pub fn growth_violations(&self, probes: &[(usize, DiscretePath, f64)]) -> usize {
        probes
            .iter()
            .filter(|(j, path, a)| {
                let x = path.prefix_unchecked(*j);
                let v = self.eval(*j, &x, *a);
                v.abs() > self.growth * (1.0 + x.running_sup_norm().powf(self.exponent)) * (1.0 + 1e-12)
            })
            .count()
    }
}

/// `|x_t|`, handy for feature code and tests.
pub fn current_norm(x: &PathPrefix<'_>) -> f64 {
    norm(x.current())
}
