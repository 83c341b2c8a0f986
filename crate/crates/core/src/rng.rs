//! Deterministic random streams.
//!
//! Every stochastic component takes an explicit seed; sub-streams are
//! derived by mixing tags into the seed so independent uses (per epoch, per
//! episode, per draw kind) never share state.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// splitmix64-style avalanche step.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and up to two tags.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a.wrapping_mul(0xd6e8_feb8_6659_fd93)) ^ b)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// I.i.d. standard normal vector of length `d`.
pub fn standard_normal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let mut data = alloc::vec::Vec::with_capacity(d);
    for _ in 0..d {
        data.push(rng.sample::<f64, _>(StandardNormal));
    }
    Tensor::vector(data)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Scalar normal draw with the given standard deviation.
pub fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let x: f64 = rng.sample(StandardNormal);
    x * std
}
