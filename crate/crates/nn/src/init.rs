//! Weight initialization helpers.

use ndarray::{Array1, Array4};
use rand::Rng;

/// Fan-in-scaled uniform init for a conv weight `[out, in, kh, kw]`.
pub fn conv_fan_in_uniform<R: Rng>(out_c: usize, in_c: usize, kh: usize, kw: usize, rng: &mut R) -> Array4<f64> {
    let fan_in = (in_c * kh * kw) as f64;
    let bound = (1.0 / fan_in).sqrt();
    Array4::from_shape_simple_fn((out_c, in_c, kh, kw), || rng.random_range(-bound..bound))
}

/// Fan-in-scaled uniform bias.
pub fn bias_fan_in_uniform<R: Rng>(out_c: usize, fan_in: usize, rng: &mut R) -> Array1<f64> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Array1::from_shape_simple_fn(out_c, || rng.random_range(-bound..bound))
}

/// Fan-in-scaled uniform init for a dense weight `[out, in]`.
pub fn dense_fan_in_uniform<R: Rng>(out_f: usize, in_f: usize, rng: &mut R) -> ndarray::Array2<f64> {
    let bound = (1.0 / in_f as f64).sqrt();
    ndarray::Array2::from_shape_simple_fn((out_f, in_f), || rng.random_range(-bound..bound))
}
