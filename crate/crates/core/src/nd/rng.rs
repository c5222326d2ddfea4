//! Seeded generators, one independent stream per consumer.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    Sampling = 4,
    Synth = 5,
}

/// Generator for `(seed, stream, index)`; `index` separates sub-streams such as
/// per-epoch or per-dialogue dropout.
pub fn stream(seed: u64, which: Stream, index: u64) -> Rng {
    // splitmix64-style mixing so neighbouring seeds do not share state
    let mut z = seed
        .wrapping_add((which as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    Xoshiro256PlusPlus::seed_from_u64(z)
}
