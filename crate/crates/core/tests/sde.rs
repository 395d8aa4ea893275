mod common;

use std::collections::HashMap;

use common::ou;
use ppde_core::noise::{NoiseKind, NoiseStream};
use ppde_core::parallel::set_workers;
use ppde_core::path::DiscretePath;
use ppde_core::sde::{ensemble_simulate, paired_sup_deviation, read_ensemble, simulate_mild, SdeProblem};
use ppde_core::stats::Estimate;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn ou_moments_match_closed_form() {
    let p = ou(256, 1.0, 0.5, 1.0);
    let e = ensemble_simulate(&p, 20_000, 1, NoiseKind::Gaussian).unwrap();
    let xt: Vec<f64> = e.paths.iter().map(|x| x.row(256)[0]).collect();
    let mean = Estimate::from_samples(&xt);
    assert!(mean.z_against((-1.0f64).exp()).abs() <= 3.0, "{mean:?}");
    let var = Estimate::variance(&xt);
    let exact = 0.25 * (1.0 - (-2.0f64).exp()) / 2.0;
    assert!(var.z_against(exact).abs() <= 3.0, "{var:?} vs {exact}");
}

#[test]
fn ensembles_do_not_depend_on_worker_count() {
    let p = ou(32, 1.0, 0.5, 1.0);
    set_workers(1);
    let a = ensemble_simulate(&p, 64, 9, NoiseKind::Gaussian).unwrap();
    set_workers(4);
    let b = ensemble_simulate(&p, 64, 9, NoiseKind::Gaussian).unwrap();
    set_workers(0);
    assert_eq!(a.paths, b.paths);
    let (mut ba, mut bb) = (Vec::new(), Vec::new());
    a.write_to(&mut ba).unwrap();
    b.write_to(&mut bb).unwrap();
    assert_eq!(ba, bb);
}

#[test]
fn ensemble_paths_regenerate_from_keys() {
    let p = ou(16, 1.0, 0.5, 0.3);
    let e = ensemble_simulate(&p, 8, 3, NoiseKind::Bernoulli).unwrap();
    for i in 0..8 {
        assert_eq!(e.regenerate(&p, i).unwrap(), e.paths[i]);
    }
    let mut bytes = Vec::new();
    e.write_to(&mut bytes).unwrap();
    let back = read_ensemble(&mut bytes.as_slice()).unwrap();
    assert_eq!(back.paths, e.paths);
    assert_eq!((back.seed, back.n_steps), (3, 16));
}

fn with_start(p: &SdeProblem, z: f64) -> SdeProblem {
    let mut q = p.clone();
    q.initial = DiscretePath::constant(*p.grid(), &[z]);
    q
}

#[test]
fn initial_condition_enters_lipschitz() {
    // the OU flow is affine in z, so the sup-deviation ratio is e^{0} = 1 at every n
    for n in [16, 64] {
        let p = ou(n, 1.0, 0.5, 0.0);
        let (a, b) = (with_start(&p, 0.2), with_start(&p, 0.5));
        let d = paired_sup_deviation(&a, &b, 200, 4, NoiseKind::Gaussian, 1.0).unwrap();
        assert!((d.mean / 0.3 - 1.0).abs() < 1e-12, "n = {n}: {d:?}");
    }
}

#[test]
fn bernoulli_paths_are_tree_branches() {
    let m = 4;
    let p = ou(m, 1.0, 0.5, 1.0);
    let n_paths = 8000;
    let e = ensemble_simulate(&p, n_paths, 5, NoiseKind::Bernoulli).unwrap();
    let mut counts: HashMap<Vec<u64>, usize> = HashMap::new();
    for x in &e.paths {
        *counts.entry(x.values().iter().map(|v| v.to_bits()).collect()).or_default() += 1;
    }
    let cells = 1usize << m;
    assert_eq!(counts.len(), cells);
    // each branch has probability 2^{-m}
    let expected = n_paths as f64 / cells as f64;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let crit = ChiSquared::new((cells - 1) as f64).unwrap().inverse_cdf(0.99);
    assert!(chi2 < crit, "{chi2} >= {crit}");
}

#[test]
fn keyed_noise_reproduces_single_paths() {
    let p = ou(32, 1.0, 0.5, 1.0);
    let e = ensemble_simulate(&p, 4, 11, NoiseKind::Gaussian).unwrap();
    let key = NoiseStream::new(11, 2, 1, NoiseKind::Gaussian);
    assert_eq!(simulate_mild(&p, &key).unwrap(), e.paths[2]);
}
