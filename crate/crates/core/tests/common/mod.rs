#![allow(dead_code)]

use ppde_core::coeffs::{Diffusion, Drift};
use ppde_core::path::{DiscretePath, Grid};
use ppde_core::sde::SdeProblem;
use ppde_core::spectral::SpectralModel;

/// Single-mode OU `dX = -X dt + σ dW` from `x0` on `[0, T]`.
pub fn ou(n_steps: usize, horizon: f64, sigma: f64, x0: f64) -> SdeProblem {
    let model = SpectralModel::new(1, vec![-1.0], 0.0, 1.0, sigma.max(1e-3), horizon).unwrap();
    let grid = Grid::new(n_steps, horizon).unwrap();
    SdeProblem::new(
        model,
        Drift::zero(),
        Diffusion::diagonal(1, 1, vec![sigma]),
        DiscretePath::constant(grid, &[x0]),
        0,
    )
    .unwrap()
}

/// Path equal to `x` up to node `j` and frozen afterwards, with some history.
pub fn probe_path(grid: Grid, j: usize, x: f64) -> DiscretePath {
    DiscretePath::from_fn(grid, 1, |i, _| {
        let i = i.min(j);
        x + 0.1 * (i as f64 * 0.7).sin()
    })
}

/// A simulated path of `problem` under an independent seed; its prefix at any
/// node is a typical stopped path.
pub fn typical_path(problem: &SdeProblem, seed: u64) -> DiscretePath {
    use ppde_core::noise::{NoiseKind, NoiseStream};
    let key = NoiseStream::new(seed, 0, problem.model.dim_k, NoiseKind::Gaussian);
    ppde_core::sde::simulate_mild(problem, &key).unwrap()
}
