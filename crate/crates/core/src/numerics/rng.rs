//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit [`SeededRng`]. Independent
//! streams are derived from a base seed and a path of integers (stream tag,
//! epoch, step, clip index, ...) with [`derive_seed`]:
//!
//! ```text
//! s0 = splitmix64(base)
//! s_{i+1} = splitmix64(s_i ^ splitmix64(path[i] + 0x9E3779B97F4A7C15))
//! ```
//!
//! and the final value seeds a xoshiro256++ generator through its own
//! SplitMix64 expansion (`seed_from_u64`).

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type SeededRng = Xoshiro256PlusPlus;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |s, &p| splitmix64(s ^ splitmix64(p.wrapping_add(GOLDEN))))
}

pub fn seeded_rng(base: u64, path: &[u64]) -> SeededRng {
    Xoshiro256PlusPlus::seed_from_u64(derive_seed(base, path))
}
