//! Deterministic stream derivation.
//!
//! Every random draw in the project comes from a ChaCha stream keyed by
//! `(seed, domain label, indices)`. Streams are re-derivable from those
//! coordinates alone, so checkpoints never need to persist generator state
//! and a resumed run replays the exact draws of an uninterrupted one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// ChaCha stream for `(seed, domain, ids)`.
pub fn stream(seed: u64, domain: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed ^ fnv1a(domain.as_bytes()));
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        let mut word = splitmix(state ^ (i as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        for &id in ids {
            word = splitmix(word ^ splitmix(id));
        }
        chunk.copy_from_slice(&word.to_le_bytes());
        state = splitmix(state);
    }
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit hash for strings (token embeddings, cache keys).
pub fn hash_str(s: &str) -> u64 {
    fnv1a(s.as_bytes())
}
