#![allow(dead_code)]

use aspvmunet::numerics::{Float, Graph, Tensor, Var};
use aspvmunet::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor<T: Float>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(lo..hi)))
}

/// `sum(x * r)` for a fixed random `r`, so no gradient vanishes by symmetry.
pub fn probe_loss<T: Float>(g: &Graph<'_, T>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x);
    let r = rand_tensor(&mut rng(seed), &shape, -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(x, r)?;
    g.sum_all(p)
}
