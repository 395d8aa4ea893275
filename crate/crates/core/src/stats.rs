//! Sample statistics and the fixed-threshold verdict rules.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Mean of i.i.d. samples with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    pub fn exact(v: f64) -> Self {
        Self {
            mean: v,
            stderr: 0.0,
            n: 1,
        }
    }

    /// Sequential, order-fixed reduction, shifted by the first sample so a
    /// constant sample has its value as exact mean.
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                n: 0,
            };
        }
        let x0 = xs[0];
        let mean = x0 + xs.iter().map(|x| x - x0).sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }

    pub fn variance(xs: &[f64]) -> Self {
        // Sample variance with the delta-method standard error.
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let dev2: Vec<f64> = xs.iter().map(|x| (x - mean).powi(2)).collect();
        let m2 = dev2.iter().sum::<f64>() / (n - 1) as f64;
        let m4 = dev2.iter().map(|d| d * d).sum::<f64>() / n as f64;
        let se = ((m4 - m2 * m2).max(0.0) / n as f64).sqrt();
        Self {
            mean: m2,
            stderr: se,
            n,
        }
    }

    /// `(self.mean - reference) / stderr`, with exact results mapped to 0 or ±∞.
    pub fn z_against(&self, reference: f64) -> f64 {
        z_score(self.mean - reference, self.stderr)
    }
}

pub fn z_score(diff: f64, stderr: f64) -> f64 {
    if stderr > 0.0 {
        diff / stderr
    } else if diff == 0.0 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Two-sided z threshold that keeps the family-wise error of `m` tests at the
/// level of a single 3σ test.
pub fn bonferroni_z(m: usize) -> f64 {
    let m = m.max(1) as f64;
    let normal = Normal::standard();
    let alpha = 2.0 * (1.0 - normal.cdf(3.0));
    normal.inverse_cdf(1.0 - alpha / (2.0 * m))
}
