//! Per-node least-squares regression on non-anticipative path features.
//!
//! A fit is `intercept + Σ_i β_i φ_i(x_{·∧t})`. Features are centred before
//! solving the ridge normal equations, so a constant target is reproduced
//! exactly (β = 0, intercept = sample mean) and the intercept is never shrunk.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::path::{DiscretePath, PathPrefix};
use crate::spectral::norm;

/// Ridge strength relative to the mean feature variance.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feature {
    /// `x_{t,k}`.
    Coord { mode: usize },
    /// `x_{t,k}^p`.
    Power { mode: usize, power: u32 },
    /// `∫_0^t x_{s,k} ds` (trapezoid).
    RunningIntegral { mode: usize },
    /// `sup_{s≤t} |x_s|`.
    RunningSupNorm,
}

impl Feature {
    pub fn name(&self) -> String {
        match self {
            Self::Coord { mode } => format!("x{mode}"),
            Self::Power { mode, power } => format!("x{mode}^{power}"),
            Self::RunningIntegral { mode } => format!("int_x{mode}"),
            Self::RunningSupNorm => "sup_norm".into(),
        }
    }

    /// Parse the names produced by [`Feature::name`].
    pub fn parse(s: &str) -> Option<Self> {
        if s == "sup_norm" {
            return Some(Self::RunningSupNorm);
        }
        if let Some(rest) = s.strip_prefix("int_x") {
            return rest.parse().ok().map(|mode| Self::RunningIntegral { mode });
        }
        let rest = s.strip_prefix('x')?;
        match rest.split_once('^') {
            Some((m, p)) => Some(Self::Power {
                mode: m.parse().ok()?,
                power: p.parse().ok()?,
            }),
            None => rest.parse().ok().map(|mode| Self::Coord { mode }),
        }
    }

    fn mode(&self) -> Option<usize> {
        match self {
            Self::Coord { mode } | Self::Power { mode, .. } | Self::RunningIntegral { mode } => {
                Some(*mode)
            }
            Self::RunningSupNorm => None,
        }
    }
}

/// Ordered list of features; the constant is implicit.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureMap {
    pub features: Vec<Feature>,
}

impl FeatureMap {
    pub fn new(features: Vec<Feature>) -> Self {
        Self { features }
    }

    /// Current coordinates, running integrals and the running sup norm.
    pub fn standard(dim_h: usize) -> Self {
        let mut features: Vec<Feature> = (0..dim_h).map(|mode| Feature::Coord { mode }).collect();
        features.extend((0..dim_h).map(|mode| Feature::RunningIntegral { mode }));
        features.push(Feature::RunningSupNorm);
        Self { features }
    }

    /// `x_{t,mode}^p` for `p = 1..=degree`.
    pub fn polynomial(mode: usize, degree: u32) -> Self {
        Self {
            features: (1..=degree)
                .map(|power| {
                    if power == 1 {
                        Feature::Coord { mode }
                    } else {
                        Feature::Power { mode, power }
                    }
                })
                .collect(),
        }
    }

    /// Only the implicit constant.
    pub fn constant_only() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(Feature::name).collect()
    }

    pub fn validate(&self, dim_h: usize) -> Result<()> {
        match self.features.iter().find(|f| f.mode().is_some_and(|m| m >= dim_h)) {
            Some(f) => Err(invalid("features", format!("{} refers to a mode beyond dim_h = {dim_h}", f.name()))),
            None => Ok(()),
        }
    }

    /// Features of the stopped path, appended to `out`.
    pub fn eval_into(&self, x: &PathPrefix<'_>, out: &mut Vec<f64>) {
        for f in &self.features {
            out.push(match *f {
                Feature::Coord { mode } => x.current()[mode],
                Feature::Power { mode, power } => x.current()[mode].powi(power as i32),
                Feature::RunningIntegral { mode } => x.running_integral(mode),
                Feature::RunningSupNorm => x.running_sup_norm(),
            });
        }
    }

    pub fn eval(&self, x: &PathPrefix<'_>) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        self.eval_into(x, &mut out);
        out
    }

    /// Features at every node `from..=n` of `path`, node-major.
    ///
    /// Running quantities are accumulated in the same order as
    /// [`FeatureMap::eval`] uses, so both agree bit for bit.
    pub fn trajectory(&self, path: &DiscretePath, from: usize) -> Vec<f64> {
        let grid = path.grid();
        let dim = path.dim();
        let dt = grid.dt();
        let nf = self.len();
        let n = grid.n_steps;
        let mut integrals = vec![0.0; dim];
        let mut sup = 0.0f64;
        let mut out = Vec::with_capacity((n + 1 - from) * nf);
        for j in 0..=n {
            let row = path.row(j);
            if j > 0 {
                let prev = path.row(j - 1);
                for k in 0..dim {
                    integrals[k] += 0.5 * dt * (prev[k] + row[k]);
                }
            }
            sup = sup.max(norm(row));
            if j < from {
                continue;
            }
            for f in &self.features {
                out.push(match *f {
                    Feature::Coord { mode } => row[mode],
                    Feature::Power { mode, power } => row[mode].powi(power as i32),
                    Feature::RunningIntegral { mode } => integrals[mode],
                    Feature::RunningSupNorm => sup,
                });
            }
        }
        out
    }
}

/// `intercept + β · φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub beta: Vec<f64>,
}

impl LinearFit {
    pub fn constant(c: f64, nf: usize) -> Self {
        Self {
            intercept: c,
            beta: vec![0.0; nf],
        }
    }

    pub fn predict(&self, phi: &[f64]) -> f64 {
        self.intercept + self.beta.iter().zip(phi).map(|(b, f)| b * f).sum::<f64>()
    }
}

/// Centred ridge least squares of `targets` on the rows of `design`
/// (`targets.len()` rows, `nf` columns, row-major).
pub fn ridge_fit(design: &[f64], nf: usize, targets: &[f64], ridge: f64, node: usize) -> Result<LinearFit> {
    let n = targets.len();
    if n == 0 {
        return Err(Error::Regression {
            node,
            reason: "no samples".into(),
        });
    }
    if design.len() != n * nf {
        return Err(Error::DimensionMismatch {
            expected: n * nf,
            got: design.len(),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) || design.iter().any(|v| !v.is_finite()) {
        return Err(Error::Regression {
            node,
            reason: "non-finite regression data".into(),
        });
    }
    let nn = n as f64;
    let y_mean = targets.iter().sum::<f64>() / nn;
    if nf == 0 {
        return Ok(LinearFit::constant(y_mean, 0));
    }
    let mut x_mean = vec![0.0; nf];
    for row in design.chunks(nf) {
        for (m, v) in x_mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut x_mean {
        *m /= nn;
    }
    let mut cov = DMatrix::<f64>::zeros(nf, nf);
    let mut rhs = DVector::<f64>::zeros(nf);
    let mut centred = vec![0.0; nf];
    for (row, y) in design.chunks(nf).zip(targets) {
        for i in 0..nf {
            centred[i] = row[i] - x_mean[i];
        }
        let yc = y - y_mean;
        for i in 0..nf {
            rhs[i] += centred[i] * yc;
            for k in 0..=i {
                cov[(i, k)] += centred[i] * centred[k];
            }
        }
    }
    for i in 0..nf {
        for k in 0..i {
            cov[(k, i)] = cov[(i, k)];
        }
    }
    let max_var = (0..nf).map(|i| cov[(i, i)]).fold(0.0, f64::max);
    let active: Vec<usize> = (0..nf)
        .filter(|&i| cov[(i, i)] > 1e-13 * max_var && cov[(i, i)] > 0.0)
        .collect();
    let mut beta = vec![0.0; nf];
    if !active.is_empty() {
        let m = active.len();
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut b = DVector::<f64>::zeros(m);
        let mut trace = 0.0;
        for (p, &i) in active.iter().enumerate() {
            b[p] = rhs[i];
            trace += cov[(i, i)];
            for (q, &k) in active.iter().enumerate() {
                a[(p, q)] = cov[(i, k)];
            }
        }
        let lambda = ridge * trace / m as f64;
        for p in 0..m {
            a[(p, p)] += lambda;
        }
        let chol = a.cholesky().ok_or_else(|| Error::Regression {
            node,
            reason: format!("normal equations are not positive definite (features {active:?})"),
        })?;
        let sol = chol.solve(&b);
        for (p, &i) in active.iter().enumerate() {
            beta[i] = sol[p];
        }
    }
    let intercept = y_mean - beta.iter().zip(&x_mean).map(|(b, m)| b * m).sum::<f64>();
    Ok(LinearFit { intercept, beta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::Grid;

    #[test]
    fn constant_targets_are_reproduced_exactly() {
        let design: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let fit = ridge_fit(&design, 2, &[1.0; 10], DEFAULT_RIDGE, 0).unwrap();
        assert_eq!(fit.beta, vec![0.0, 0.0]);
        assert_eq!(fit.intercept, 1.0);
    }

    #[test]
    fn recovers_linear_model() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let design: Vec<f64> = xs.iter().flat_map(|x| [*x, x * x]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 - 3.0 * x + 0.5 * x * x).collect();
        let fit = ridge_fit(&design, 2, &ys, DEFAULT_RIDGE, 0).unwrap();
        assert!((fit.intercept - 2.0).abs() < 1e-5);
        assert!((fit.beta[0] + 3.0).abs() < 1e-5);
        assert!((fit.beta[1] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn collinear_features_are_regularized() {
        let design: Vec<f64> = (0..30).flat_map(|i| [i as f64, i as f64]).collect();
        let ys: Vec<f64> = (0..30).map(|i| 4.0 * i as f64).collect();
        let fit = ridge_fit(&design, 2, &ys, DEFAULT_RIDGE, 3).unwrap();
        assert!((fit.beta[0] + fit.beta[1] - 4.0).abs() < 1e-6);
        assert!(ridge_fit(&design, 2, &[f64::NAN; 30], DEFAULT_RIDGE, 3).is_err());
    }

    #[test]
    fn trajectory_matches_prefix_evaluation_bitwise() {
        let grid = Grid::new(12, 1.0).unwrap();
        let path = DiscretePath::from_fn(grid, 2, |j, k| ((j * 7 + k * 3) as f64).cos());
        let map = FeatureMap::new(vec![
            Feature::Coord { mode: 1 },
            Feature::Power { mode: 0, power: 3 },
            Feature::RunningIntegral { mode: 0 },
            Feature::RunningIntegral { mode: 1 },
            Feature::RunningSupNorm,
        ]);
        let traj = map.trajectory(&path, 2);
        for j in 2..=12 {
            let direct = map.eval(&path.prefix(j).unwrap());
            let row = &traj[(j - 2) * 5..(j - 1) * 5];
            for (a, b) in direct.iter().zip(row) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn feature_names_round_trip() {
        let map = FeatureMap::new(vec![
            Feature::Coord { mode: 0 },
            Feature::Power { mode: 2, power: 3 },
            Feature::RunningIntegral { mode: 1 },
            Feature::RunningSupNorm,
        ]);
        for f in &map.features {
            assert_eq!(Feature::parse(&f.name()), Some(*f));
        }
        assert!(map.validate(2).is_err());
        assert!(map.validate(3).is_ok());
    }
}
