//! Deterministic seed derivation.
//!
//! All randomness in a run flows from a single root seed, expanded with a
//! counter-based scheme per stage so each stage is independently
//! reproducible and no two stages share an RNG stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; stable across platforms and releases.
fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; keeps stage names order-sensitive.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Seed for a named stage of a run.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    splitmix64(root ^ fnv1a(stage.as_bytes()))
}

/// Seed for the `counter`-th unit of work within a stage.
pub fn counter_seed(root: u64, stage: &str, counter: u64) -> u64 {
    splitmix64(stage_seed(root, stage) ^ splitmix64(counter))
}

/// Seed keyed by an arbitrary string (for example a task id).
pub fn keyed_seed(root: u64, stage: &str, key: &str) -> u64 {
    splitmix64(stage_seed(root, stage) ^ fnv1a(key.as_bytes()))
}

/// Deterministic RNG for a derived seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
