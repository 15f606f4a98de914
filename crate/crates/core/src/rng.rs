//! Seeded randomness. Every random draw in the crate goes through a
//! `ChaCha8Rng`, whose stream is identical on every platform.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cmdlab_autograd::Real;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const CONTENT_SALT: u64 = 0x636f_6e74_656e_74; // "content"
const MOTION_SALT: u64 = 0x6d6f_7469_6f6e; // "motion"

/// Splits one user seed into independent content-stage and motion-stage seeds:
/// `content = mix64(seed ^ "content")`, `motion = mix64(seed ^ "motion")`,
/// with the salts read as big-endian ASCII.
pub fn split_seed(seed: u64) -> (u64, u64) {
    (mix64(seed ^ CONTENT_SALT), mix64(seed ^ MOTION_SALT))
}

pub fn gaussian<F: Real>(rng: &mut SeededRng, shape: &[usize]) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<F: Real>(rng: &mut SeededRng, shape: &[usize], std: f64) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || loop {
        let x: f64 = rng.sample(StandardNormal);
        if x.abs() <= 2.0 {
            break F::of(x * std);
        }
    })
}
