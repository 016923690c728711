#![allow(dead_code)]

use compatkit::model::{standardize, ActiveSet, DesignMatrix, GramMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standardized n×p Gaussian design.
pub fn gaussian_design(n: usize, p: usize, seed: u64) -> DesignMatrix {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n * p).map(|_| r.sample(StandardNormal)).collect();
    standardize(&DesignMatrix::from_row_slice(n, p, &data).unwrap()).unwrap().0
}

pub fn gaussian_gram(n: usize, p: usize, seed: u64) -> GramMatrix {
    GramMatrix::from_design(&gaussian_design(n, p, seed))
}

/// A random point with ‖v_S‖₁ = 1 and ‖v_{S^c}‖₁ ≤ 3.
pub fn feasible_point(active: &ActiveSet, r: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; active.p()];
    let on: Vec<f64> = (0..active.s()).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    let l1: f64 = on.iter().map(|x| x.abs()).sum();
    for (&j, x) in active.indices().iter().zip(&on) {
        v[j] = x / l1;
    }
    let comp = active.complement();
    if !comp.is_empty() {
        let off: Vec<f64> = comp.iter().map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let l1: f64 = off.iter().map(|x| x.abs()).sum();
        let budget = 3.0 * r.gen::<f64>();
        for (&j, x) in comp.iter().zip(&off) {
            v[j] = budget * x / l1;
        }
    }
    v
}
