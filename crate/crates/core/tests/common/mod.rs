#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robust_mlmc::grid::{GridFunction, GridHierarchy};
use robust_mlmc::harness::{preset, RunConfig};
use robust_mlmc::mlmc::Estimator;

/// Desk preset with edits applied.
pub fn config(name: &str, edit: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = preset(name).unwrap();
    edit(&mut c);
    c.validate().unwrap();
    c
}

pub fn estimator(c: &RunConfig) -> Estimator {
    Estimator::new(c.problem.to_spec().unwrap(), c.estimator.clone()).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_fn(h: &GridHierarchy, level: usize, rng: &mut ChaCha8Rng) -> GridFunction {
    GridFunction::new(level, (0..h.len(level)).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
