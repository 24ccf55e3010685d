//! Seeded random streams.
//!
//! Every stochastic choice in the crate draws from PCG32 (`pcg32` from the
//! PCG family: 64-bit LCG state, multiplier 6364136223846793005, XSH-RR
//! output). A run is controlled by one user seed; independent consumers use
//! distinct stream ids so adding draws in one place never shifts another.

use rand::seq::SliceRandom;
use rand::RngExt;
pub use rand_pcg::Pcg32;

/// Stream ids for the consumers inside this crate.
pub mod streams {
    pub const MODEL_INIT: u64 = 1;
    pub const LM_INIT: u64 = 2;
    pub const EPOCH_ORDER: u64 = 3;
    pub const LM_EPOCH_ORDER: u64 = 4;
}

/// Generator for `(seed, stream)`. The seed is mixed so that small adjacent
/// seeds give unrelated states.
pub fn stream(seed: u64, stream: u64) -> Pcg32 {
    let state = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0xD1B5_4A32_D192_ED03);
    Pcg32::new(state, stream)
}

/// Uniform sample in `[lo, hi)`.
pub fn uniform(rng: &mut Pcg32, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Fisher-Yates shuffle in place.
pub fn shuffle<T>(rng: &mut Pcg32, items: &mut [T]) {
    items.shuffle(rng);
}
