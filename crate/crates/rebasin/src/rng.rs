//! Deterministic seeding utilities.
//!
//! All randomness in the crate flows through ChaCha streams whose 256-bit
//! seeds are expanded from a single `u64` with splitmix64. Independent
//! streams (per experiment cell, per epoch, per purpose) are derived by
//! hashing the master seed together with a textual tag and integer parts,
//! so the set of cells that run, and in what order, can never perturb any
//! individual stream.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// 64-bit FNV-1a. Also used as the checkpoint payload checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `(master, tag, parts)`.
pub fn derive_seed(master: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut buf = Vec::with_capacity(8 + tag.len() + parts.len() * 8);
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    for p in parts {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    fnv1a64(&buf)
}

/// ChaCha stream fully determined by a 64-bit seed.
pub fn chacha(seed: u64) -> ChaCha8Rng {
    let mut state = seed;
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Unbiased uniform draw from `0..bound` by rejection.
pub fn uniform_index(rng: &mut ChaCha8Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    let bound = bound as u64;
    let zone = u64::MAX - u64::MAX % bound;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % bound) as usize;
        }
    }
}

/// In-place Fisher-Yates driven by the given stream.
pub fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}
