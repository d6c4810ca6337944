//! Seeded random streams.
//!
//! Every stochastic decision is drawn from a ChaCha stream keyed by a seed and
//! a purpose-specific counter, so results depend only on those inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// SplitMix64 finalizer, used to decorrelate (seed, counter) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` alone.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed))
}

/// Independent stream for (`seed`, `stream`, `index`).
pub fn derived(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ stream) ^ index))
}

/// Child seed for (`seed`, `stream`, `index`), for handing to APIs that take
/// a seed rather than a generator.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(seed) ^ stream) ^ index ^ 0x5eed)
}
