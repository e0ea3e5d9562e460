//! Parameter initialization.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::rng;
use crate::tensor::Tensor;

/// Standard deviation of the initial weight distribution.
pub const INIT_STD: f64 = 0.1;

/// Initial value of the bias weight `w₀` in every augmented row. Non-zero so
/// that no weight row starts with zero norm.
pub const BIAS_INIT: f64 = 0.1;

/// Initial softmax re-scale `γ_out`.
pub const OUTPUT_SCALE_INIT: f64 = 10.0;

/// Normal(0, std²) draws, resampled until they fall within ±2·std.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        };
    }
    t
}

/// Truncated-normal weights with standard deviation [`INIT_STD`], fully
/// determined by `seed`.
pub fn init_weights(shape: &[usize], seed: u64) -> Tensor {
    truncated_normal(shape, INIT_STD, &mut rng::seeded(seed))
}
