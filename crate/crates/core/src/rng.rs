//! Seed handling. Every random draw in the crate comes from a ChaCha8
//! stream addressed by `(seed, stream)`, so any component can be replayed
//! without threading generator state through call sites.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal(rng: &mut LabRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Tensor of i.i.d. `N(0, std^2)` draws, filled in index order.
pub fn normal_tensor<R: Real>(rng: &mut LabRng, shape: &[usize], std: f64) -> Tensor<R> {
    Tensor::from_fn(shape, |_| R::from_f64(std * standard_normal(rng)))
}

pub fn uniform(rng: &mut LabRng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Uniform index in `0..n`.
pub fn index(rng: &mut LabRng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn next_seed(rng: &mut LabRng) -> u64 {
    rng.next_u64()
}
