//! Counter-based seed derivation.
//!
//! Every random stream in the crate is keyed by `(base seed, stage, index)`
//! so results never depend on scheduling order or global state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage tags for seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Split = 1,
    Loading = 2,
    Beta = 3,
    Subject = 4,
    Bootstrap = 5,
    Replicate = 6,
    Selection = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `(seed, stage, index)`.
pub fn derive_seed(seed: u64, stage: Stage, index: u64) -> u64 {
    let a = splitmix64(seed ^ splitmix64(stage as u64));
    splitmix64(a ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(seed: u64, stage: Stage, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage, index))
}

/// Stable 64-bit hash of a string keyed by a seed (FNV-1a folded through splitmix).
pub fn keyed_hash(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(h ^ splitmix64(seed))
}
