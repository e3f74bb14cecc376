//! Seeded parameter initialisers.

use rand::Rng;

use crate::autodiff::{Real, Tensor};

/// Uniform in `±1/√fan_in`.
pub fn uniform<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    scaled(rng, shape, bound)
}

/// Uniform in `±bound`.
pub fn scaled<T: Real, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("extents match")
}

pub fn zeros<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}

pub fn ones<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one())
}
