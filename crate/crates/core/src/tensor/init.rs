use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Weight matrix `[fan_in, fan_out]` drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape")
}

/// Embedding table `[rows, dim]` drawn from N(0, 0.02).
pub fn init_embedding<R: Rng + ?Sized>(rng: &mut R, rows: usize, dim: usize) -> Tensor {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let data = (0..rows * dim).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, dim], data).expect("consistent shape")
}
