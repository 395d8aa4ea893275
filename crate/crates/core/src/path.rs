//! Discretized path space: uniform time grids, `H`-valued paths sampled at
//! grid nodes, the stopping map `x -> x_{·∧t}` and the pseudometric `d_∞`.
//!
//! Times are always grid nodes. Callers holding a real time go through
//! [`Grid::node_of`], which rejects anything that is not a node.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n_steps: usize,
    pub horizon: f64,
}

impl Grid {
    pub fn new(n_steps: usize, horizon: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(invalid("n_steps", "must be at least 1"));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(invalid("horizon", format!("{horizon} must be positive")));
        }
        Ok(Self { n_steps, horizon })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    /// Time of node `j`; node `n_steps` is exactly the horizon.
    pub fn time(&self, j: usize) -> f64 {
        self.horizon * (j as f64 / self.n_steps as f64)
    }

    /// Snap `t` to its grid node. Off-node times are rejected.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        let dt = self.dt();
        let j = (t / dt).round() as usize;
        if j > self.n_steps || (t - self.time(j)).abs() > 1e-9 * dt.max(1e-300) + 1e-14 {
            return Err(Error::OffGrid { t, step: dt });
        }
        Ok(j)
    }

    pub(crate) fn check_node(&self, j: usize) -> Result<()> {
        if j > self.n_steps {
            return Err(Error::TimeOutOfRange {
                t: self.horizon * (j as f64 / self.n_steps as f64),
                horizon: self.horizon,
            });
        }
        Ok(())
    }
}

/// A path `x ∈ C([0,T]; H)` sampled at every grid node, stored node-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePath {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
}

impl DiscretePath {
    pub fn from_values(grid: Grid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be positive"));
        }
        if values.len() != grid.n_nodes() * dim {
            return Err(Error::DimensionMismatch {
                expected: grid.n_nodes() * dim,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("values", "path values must be finite"));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn constant(grid: Grid, v: &[f64]) -> Self {
        let values = (0..grid.n_nodes()).flat_map(|_| v.iter().copied()).collect();
        Self {
            grid,
            dim: v.len(),
            values,
        }
    }

    pub fn from_fn(grid: Grid, dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.n_nodes() * dim);
        for j in 0..grid.n_nodes() {
            for k in 0..dim {
                values.push(f(j, k));
            }
        }
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// The path seen by a non-anticipative functional at node `j`.
    pub fn prefix(&self, j: usize) -> Result<PathPrefix<'_>> {
        self.grid.check_node(j)?;
        Ok(self.prefix_unchecked(j))
    }

    pub(crate) fn prefix_unchecked(&self, j: usize) -> PathPrefix<'_> {
        PathPrefix {
            grid: self.grid,
            dim: self.dim,
            node: j,
            values: &self.values[..(j + 1) * self.dim],
        }
    }

    /// Pointwise difference; the grids must coincide.
    pub fn sub(&self, other: &DiscretePath) -> Result<DiscretePath> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::GridMismatch);
        }
        Ok(DiscretePath {
            grid: self.grid,
            dim: self.dim,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }
}

/// The restriction of a path to the nodes `0..=node`.
///
/// This is the only view of a path that coefficient functionals receive, so
/// whatever they compute depends on the path up to `node` and nothing else.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    grid: Grid,
    dim: usize,
    node: usize,
    values: &'a [f64],
}

impl<'a> PathPrefix<'a> {
    /// Wrap node-major values for nodes `0..=node`.
    pub fn new(grid: Grid, dim: usize, values: &'a [f64]) -> Result<Self> {
        if dim == 0 || values.is_empty() || !values.len().is_multiple_of(dim) {
            return Err(invalid("values", "prefix length must be a positive multiple of dim"));
        }
        let node = values.len() / dim - 1;
        grid.check_node(node)?;
        Ok(Self {
            grid,
            dim,
            node,
            values,
        })
    }

    pub fn node(&self) -> usize {
        self.node
    }

    pub fn time(&self) -> f64 {
        self.grid.time(self.node)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn current(&self) -> &'a [f64] {
        &self.values[self.node * self.dim..]
    }

    pub fn row(&self, j: usize) -> &'a [f64] {
        assert!(j <= self.node, "row {j} is beyond the prefix end {}", self.node);
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    pub fn values(&self) -> &'a [f64] {
        self.values
    }

    /// Trapezoidal `∫_0^t x_s · e_k ds`.
    pub fn running_integral(&self, k: usize) -> f64 {
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for j in 0..self.node {
            acc += 0.5 * dt * (self.values[j * self.dim + k] + self.values[(j + 1) * self.dim + k]);
        }
        acc
    }

    /// `sup_{s ≤ t} |x_s|_H` over the nodes.
    pub fn running_sup_norm(&self) -> f64 {
        self.values.chunks(self.dim).map(norm).fold(0.0, f64::max)
    }

    /// The full stopped path `x_{·∧t}`.
    pub fn to_path(&self) -> DiscretePath {
        let mut values = Vec::with_capacity(self.grid.n_nodes() * self.dim);
        values.extend_from_slice(self.values);
        let last = self.current();
        for _ in self.node + 1..self.grid.n_nodes() {
            values.extend_from_slice(last);
        }
        DiscretePath {
            grid: self.grid,
            dim: self.dim,
            values,
        }
    }
}

/// `x_{·∧t}`: agrees with `x` up to `t` and is frozen at `x(t)` afterwards.
pub fn stop_path(x: &DiscretePath, t: f64) -> Result<DiscretePath> {
    let j = x.grid.node_of(t)?;
    Ok(x.prefix_unchecked(j).to_path())
}

/// Node-indexed variant of [`stop_path`].
pub fn stop_at(x: &DiscretePath, j: usize) -> Result<DiscretePath> {
    Ok(x.prefix(j)?.to_path())
}

/// Max over nodes of the `H`-norm.
pub fn sup_norm(x: &DiscretePath) -> f64 {
    x.values.chunks(x.dim).map(norm).fold(0.0, f64::max)
}

/// `d_∞((t,x),(t',x')) = |t - t'| + |x_{·∧t} - x'_{·∧t'}|_∞`.
pub fn d_infty(a: (f64, &DiscretePath), b: (f64, &DiscretePath)) -> Result<f64> {
    let (ta, xa) = a;
    let (tb, xb) = b;
    if xa.grid != xb.grid || xa.dim != xb.dim {
        return Err(Error::GridMismatch);
    }
    let ja = xa.grid.node_of(ta)?;
    let jb = xb.grid.node_of(tb)?;
    let dim = xa.dim;
    let mut sup = 0.0f64;
    let mut diff = vec![0.0; dim];
    for j in 0..xa.grid.n_nodes() {
        let ra = xa.row(j.min(ja));
        let rb = xb.row(j.min(jb));
        for k in 0..dim {
            diff[k] = ra[k] - rb[k];
        }
        sup = sup.max(norm(&diff));
    }
    Ok((xa.grid.time(ja) - xb.grid.time(jb)).abs() + sup)
}

#[derive(Debug, Clone, Serialize)]
pub struct NonAnticipationViolation {
    pub probe: usize,
    pub node: usize,
    pub original: f64,
    pub perturbed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NonAnticipationReport {
    pub probes: usize,
    pub violations: Vec<NonAnticipationViolation>,
}

impl NonAnticipationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Probe a functional that is handed whole paths for dependence on the
/// future: `f(t, x)` must equal `f(t, x + δ)` bit for bit whenever `δ`
/// vanishes on the nodes up to `t`.
pub fn assert_non_anticipative<F>(
    f: F,
    probes: &[(usize, DiscretePath, DiscretePath)],
) -> Result<NonAnticipationReport>
where
    F: Fn(usize, &DiscretePath) -> f64,
{
    let mut violations = Vec::new();
    for (i, (node, x, delta)) in probes.iter().enumerate() {
        if x.grid != delta.grid || x.dim != delta.dim {
            return Err(Error::GridMismatch);
        }
        x.grid.check_node(*node)?;
        if delta.values[..(node + 1) * x.dim].iter().any(|v| *v != 0.0) {
            return Err(invalid(
                "perturbation",
                format!("probe {i} modifies nodes at or before {node}"),
            ));
        }
        let perturbed = DiscretePath {
            grid: x.grid,
            dim: x.dim,
            values: x.values.iter().zip(&delta.values).map(|(a, b)| a + b).collect(),
        };
        let a = f(*node, x);
        let b = f(*node, &perturbed);
        if a.to_bits() != b.to_bits() {
            violations.push(NonAnticipationViolation {
                probe: i,
                node: *node,
                original: a,
                perturbed: b,
            });
        }
    }
    Ok(NonAnticipationReport {
        probes: probes.len(),
        violations,
    })
}
