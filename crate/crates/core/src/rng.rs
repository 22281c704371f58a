//! Deterministic random-stream derivation.
//!
//! Every source of randomness in a run (initialization, shuffling, negative
//! sampling, Gumbel noise, ...) draws from its own named stream derived from
//! the single root seed. The derivation is pure arithmetic, so identical
//! `(seed, label, index)` triples yield identical streams on every platform.
//!
//! Scheme: the 32-byte ChaCha key is filled with successive `splitmix64`
//! outputs of `root ^ fnv1a64(label) ^ index`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the RNG for a named stream of a run.
pub fn stream(root_seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    let mut state = root_seed ^ fnv1a64(label.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
