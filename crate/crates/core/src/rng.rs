//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream derived from (base seed, purpose tag, indices), so adding or
//! removing one consumer never shifts another's sequence.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and an arbitrary list of tags.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ mix(t));
    }
    s
}

/// Stable tag for a named purpose ("mask", "dropout", ...).
pub fn tag(name: &str) -> u64 {
    // FNV-1a over the name bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}

pub fn rng_named(base: u64, name: &str, tags: &[u64]) -> ChaCha8Rng {
    let mut all = vec![tag(name)];
    all.extend_from_slice(tags);
    rng_from(base, &all)
}
