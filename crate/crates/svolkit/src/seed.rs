//! Reproducible random streams.
//!
//! Every replication, chain stage, and simulated path owns an independent
//! stream derived from (master seed, index) through a splittable
//! counter-based scheme: the master seed is expanded with SplitMix64 into a
//! ChaCha key and the index selects the ChaCha stream counter. Identical
//! (seed, index) pairs always reproduce the same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 step; used only to expand and mix seeds.
fn splitmix64(state: &mut u64) {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    *state = z ^ (z >> 31);
}

/// Derive a child seed from a master seed and an index.
///
/// Children with distinct indices are statistically independent; the map is
/// pure so replications can be re-run standalone.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut s = master ^ index.wrapping_mul(0xd1342543de82ef95);
    splitmix64(&mut s);
    splitmix64(&mut s);
    s
}

/// Build the RNG for a given seed. Stream 0 of a ChaCha12 generator keyed
/// by the SplitMix64 expansion of the seed.
pub fn rng_from_seed(seed: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    let mut s = seed;
    for chunk in key.chunks_exact_mut(8) {
        splitmix64(&mut s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// RNG for (master, index): keyed by the master seed, positioned on the
/// counter stream selected by the index.
pub fn rng_for(master: u64, index: u64) -> ChaCha12Rng {
    let mut rng = rng_from_seed(master);
    rng.set_stream(index.into());
    rng
}
