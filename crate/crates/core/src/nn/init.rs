use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::real::Real;

/// Kaiming-normal initialization with fan-in scaling, for ReLU stacks.
pub fn he_normal<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::lit(normal.sample(rng)))
}

/// Uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_fan_in<F: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new(-bound, bound).expect("non-empty range");
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::lit(dist.sample(rng)))
}
