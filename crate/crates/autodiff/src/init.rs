use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Tensor with i.i.d. `N(0, std²)` entries.
pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// He (Kaiming) normal initialization for a layer with `fan_in` inputs.
pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    normal(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}
