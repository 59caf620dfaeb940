use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))` for a `fan_in x fan_out` matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("matching length")
}
