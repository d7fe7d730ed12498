//! Seeded randomness.
//!
//! Every random draw in the crate comes from a SplitMix64 stream (Steele, Lea
//! and Flood's 64-bit generator: state += 0x9E3779B97F4A7C15, then the
//! variant-13 finalizer). Child streams for frames, trials or batches are
//! keyed by [`derive_seed`], so any single frame can be regenerated in
//! isolation.

use rand::{RngExt, SeedableRng};
pub use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

pub fn rng(seed: u64) -> Rng {
    SplitMix64::seed_from_u64(seed)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed.wrapping_add(GOLDEN)) ^ index.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// Uniform draw in `[lo, hi]`; returns `lo` for a degenerate range.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn normal(rng: &mut Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
