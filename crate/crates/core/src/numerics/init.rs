//! Trainable parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Real, Tensor};

/// Entries drawn from `N(0, std²)`.
pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("standard deviation must be finite and non-negative");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree").trainable()
}

/// He initialization for layers followed by a ReLU.
pub fn he<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Glorot initialization for linear and saturating layers.
pub fn glorot<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    normal(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

pub fn zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).trainable()
}
