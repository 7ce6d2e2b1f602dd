//! Deterministic random number generation.
//!
//! Everything seeded in this crate uses ChaCha12, a counter-based stream
//! cipher RNG: the same 64-bit seed yields the same stream on every
//! platform, which is what makes compression, data generation, and
//! training runs reproducible from a config file alone.

use rand::SeedableRng;

/// The crate-wide deterministic generator.
pub type DetRng = rand_chacha::ChaCha12Rng;

/// Seed a deterministic stream from a 64-bit value.
pub fn det_rng(seed: u64) -> DetRng {
    DetRng::seed_from_u64(seed)
}

/// Derive an independent child seed, e.g. one per layer or per restart.
/// Splitmix64 step; avoids overlap between neighbouring seeds.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
