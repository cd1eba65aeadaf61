use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::Matrix;

/// Glorot/Xavier uniform initialization: entries drawn from
/// `U(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: (usize, usize), rng: &mut R) -> Matrix {
    let bound = xavier_bound(shape);
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

pub fn xavier_bound((fan_in, fan_out): (usize, usize)) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn xavier_init(shape: (usize, usize), seed: u64) -> Matrix {
    xavier_uniform(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}
