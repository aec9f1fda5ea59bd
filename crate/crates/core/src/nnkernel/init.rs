//! Weight initialization.

use rand::Rng;

use super::real::Real;
use super::tensor::Tensor;

/// Uniform in +-sqrt(6 / (fan_in + fan_out)); biases are zeroed separately.
pub fn glorot_uniform<T: Real, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| T::c(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("generated data matches shape")
}
