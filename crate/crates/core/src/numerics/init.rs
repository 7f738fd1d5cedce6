use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Float, Tensor};

/// Seeded source of initial parameter values.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn uniform<T: Float>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(self.rng.gen_range(-bound..=bound)))
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for linear and
    /// convolution weights and biases.
    pub fn fan_in<T: Float>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt())
    }

    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
