//! Spectral truncation of the state space.
//!
//! `H` is represented by its first `dim_h` eigenmodes of a nonpositive,
//! diagonal generator `A`, and the noise space `K` by `dim_k` modes. In this
//! basis the semigroup is `e^{sA} v = (e^{s λ_k} v_k)_k` and is evaluated
//! exactly.

use serde::{Deserialize, Serialize};

use crate::coeffs::Diffusion;
use crate::error::{invalid, Error, Result};
use crate::path::{sup_norm, DiscretePath};

/// Problem-wide constants: the truncated generator and the structural
/// constants of the drift/diffusion assumptions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    pub dim_h: usize,
    pub dim_k: usize,
    pub eigenvalues: Vec<f64>,
    /// Smoothing exponent of `e^{sA} σ`, in `[0, 1/2)`.
    pub gamma: f64,
    /// Lipschitz/growth constant of the drift.
    pub lip_b: f64,
    /// Smoothing constant of the diffusion.
    pub lip_sigma: f64,
    pub horizon: f64,
}

impl SpectralModel {
    pub fn new(
        dim_k: usize,
        eigenvalues: Vec<f64>,
        gamma: f64,
        lip_b: f64,
        lip_sigma: f64,
        horizon: f64,
    ) -> Result<Self> {
        let model = Self {
            dim_h: eigenvalues.len(),
            dim_k,
            eigenvalues,
            gamma,
            lip_b,
            lip_sigma,
            horizon,
        };
        model.validate()?;
        Ok(model)
    }

    /// Heat-type generator `λ_k = -scale * k^2`, `k = 1..=dim_h`.
    pub fn heat(
        dim_h: usize,
        dim_k: usize,
        scale: f64,
        gamma: f64,
        lip_b: f64,
        lip_sigma: f64,
        horizon: f64,
    ) -> Result<Self> {
        let eig = (1..=dim_h).map(|k| -scale * (k * k) as f64).collect();
        Self::new(dim_k, eig, gamma, lip_b, lip_sigma, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_h == 0 || self.eigenvalues.len() != self.dim_h {
            return Err(invalid("dim_h", "must be positive and match the eigenvalue count"));
        }
        if self.dim_k == 0 {
            return Err(invalid("dim_k", "must be positive"));
        }
        if let Some(l) = self.eigenvalues.iter().find(|l| !l.is_finite() || **l > 0.0) {
            return Err(invalid("eigenvalues", format!("{l} is not a finite nonpositive number")));
        }
        check_gamma(self.gamma)?;
        for (name, v) in [
            ("lip_b", self.lip_b),
            ("lip_sigma", self.lip_sigma),
            ("horizon", self.horizon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(name, format!("{v} must be finite and positive")));
            }
        }
        Ok(())
    }

    /// Diagonal of `e^{sA}`.
    pub fn semigroup_factors(&self, s: f64) -> Result<Vec<f64>> {
        if !(s >= 0.0) {
            return Err(invalid("s", format!("semigroup time {s} must be nonnegative")));
        }
        Ok(self.eigenvalues.iter().map(|l| (s * l).exp()).collect())
    }

    pub fn semigroup_apply(&self, s: f64, v: &HilbertVec) -> Result<HilbertVec> {
        if v.dim() != self.dim_h {
            return Err(Error::DimensionMismatch {
                expected: self.dim_h,
                got: v.dim(),
            });
        }
        if s == 0.0 {
            return Ok(v.clone());
        }
        let f = self.semigroup_factors(s)?;
        Ok(HilbertVec(v.0.iter().zip(&f).map(|(x, e)| x * e).collect()))
    }

    /// `e^{sA} m`, row-scaled.
    pub fn semigroup_apply_operator(&self, s: f64, m: &OperatorMatrix) -> Result<OperatorMatrix> {
        if m.rows != self.dim_h {
            return Err(Error::DimensionMismatch {
                expected: self.dim_h,
                got: m.rows,
            });
        }
        let f = self.semigroup_factors(s)?;
        let mut out = m.clone();
        for (r, e) in f.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= e;
            }
        }
        Ok(out)
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..0.5).contains(&gamma) {
        return Err(invalid("gamma", format!("{gamma} is outside [0, 1/2)")));
    }
    Ok(())
}

/// An element of the truncated `H`, in eigenbasis coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HilbertVec(pub Vec<f64>);

impl HilbertVec {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A linear map `K -> H` stored row-major (`rows = dim_h`, `cols = dim_k`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<f64>,
}

impl OperatorMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            entries: vec![0.0; rows * cols],
        }
    }

    /// Rectangular diagonal with the given entries (extra entries ignored).
    pub fn diagonal(rows: usize, cols: usize, diag: &[f64]) -> Self {
        let mut m = Self::zeros(rows, cols);
        for (i, d) in diag.iter().enumerate().take(rows.min(cols)) {
            m.entries[i * cols + i] = *d;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.entries[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self * w`.
    pub fn apply_add(&self, w: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.entries[r * self.cols..(r + 1) * self.cols];
            *o += row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::DimensionMismatch {
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect(),
        })
    }
}

/// Hilbert–Schmidt norm: Frobenius norm in the two orthonormal bases.
pub fn hs_norm(m: &OperatorMatrix) -> f64 {
    norm(&m.entries)
}

/// Moment threshold `p* = 2 / (1 - 2γ)`.
pub fn critical_exponent(gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(2.0 / (1.0 - 2.0 * gamma))
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothingReport {
    /// Smallest `c` with `|e^{sA} σ(t,x)|_HS <= c s^{-γ} (1 + |x|_∞)` on all samples.
    pub constant: f64,
    /// Per-sample constants, in input order.
    pub per_sample: Vec<f64>,
    pub violation: bool,
}

/// Sample-based check of the smoothing bound on `e^{sA} σ`.
pub fn check_smoothing(
    model: &SpectralModel,
    sigma: &Diffusion,
    samples: &[(usize, DiscretePath)],
    s_grid: &[f64],
) -> Result<SmoothingReport> {
    if samples.is_empty() {
        return Err(Error::Empty("sample set"));
    }
    if s_grid.is_empty() {
        return Err(Error::Empty("s grid"));
    }
    if let Some(s) = s_grid.iter().find(|s| !(**s > 0.0)) {
        return Err(invalid("s_grid", format!("{s} is not positive")));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for (node, path) in samples {
        let prefix = path.prefix(*node)?;
        let m = sigma.matrix(*node, &prefix);
        let weight = 1.0 + sup_norm(&prefix.to_path());
        let mut c = 0.0f64;
        for &s in s_grid {
            let hs = hs_norm(&model.semigroup_apply_operator(s, &m)?);
            c = c.max(hs * s.powf(model.gamma) / weight);
        }
        per_sample.push(c);
    }
    let constant = per_sample.iter().cloned().fold(0.0, f64::max);
    Ok(SmoothingReport {
        constant,
        violation: constant > model.lip_sigma,
        per_sample,
    })
}
