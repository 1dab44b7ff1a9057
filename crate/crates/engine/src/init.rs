use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// Glorot/Xavier uniform: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
pub(crate) fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit);
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("glorot_uniform: shape")
}
