//! Deterministic seed splitting.
//!
//! A stage seed is derived from a global seed and a textual stage tag:
//! the tag is hashed with 64-bit FNV-1a, xor-ed into the global seed, and the
//! result is passed through one SplitMix64 finalization round. Distinct tags
//! give statistically independent streams; the mapping is stable across
//! platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `tag` under `global`.
pub fn derive(global: u64, tag: &str) -> u64 {
    splitmix(global ^ fnv1a(tag))
}

/// Seed for the `index`-th member of a family tagged `tag`.
pub fn derive_indexed(global: u64, tag: &str, index: u64) -> u64 {
    splitmix(derive(global, tag).wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_distinct() {
        assert_eq!(derive(7, "condense"), derive(7, "condense"));
        assert_ne!(derive(7, "condense"), derive(7, "evaluate"));
        assert_ne!(derive_indexed(7, "eval", 0), derive_indexed(7, "eval", 1));
    }
}
