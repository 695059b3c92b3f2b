//! Deterministic, purpose-keyed random streams.
//!
//! Every piece of randomness in the crate is drawn from a ChaCha stream
//! derived from `(master seed, purpose string, index)`. Streams for
//! different purposes never interact, so e.g. skipping the unsupervised
//! pipeline entirely does not perturb supervised batch shuffles, and a
//! resumed run re-derives exactly the streams the uninterrupted run used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes `(master, purpose, index)` into a single 64-bit sub-seed.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut state = master ^ fnv1a64(purpose.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut out = 0;
    for _ in 0..3 {
        out = splitmix64(&mut state);
    }
    out
}

/// A ChaCha12 stream keyed by `(master, purpose, index)`.
pub fn stream(master: u64, purpose: &str, index: u64) -> ChaCha12Rng {
    let mut state = derive_seed(master, purpose, index);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
