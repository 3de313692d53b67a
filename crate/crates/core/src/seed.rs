//! Seed derivation.
//!
//! Every stochastic stage draws from a `ChaCha8Rng` whose seed is derived from
//! the run seed plus a stage tag, so stages never share a stream and results
//! do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 64-bit avalanche mixer (splitmix64 finalizer).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed with the avalanche mixer.
pub fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| mix64(acc ^ mix64(p)))
}

/// SHA-256 over `salt || word_0 || word_1 ...` (little-endian words),
/// truncated to 64 bits. Used where a pre-shared salt keys the seed.
pub fn salted_hash(salt: &[u8], words: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(salt);
    for w in words {
        h.update(w.to_le_bytes());
    }
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    rng(derive(parts))
}

/// Stage tags keep derived streams apart.
pub mod tag {
    pub const MODEL: u64 = 0x4D4F_4445;
    pub const PROBE: u64 = 0x5052_4F42;
    pub const CORPUS: u64 = 0x434F_5250;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const POISON: u64 = 0x504F_4953;
    pub const KMEANS: u64 = 0x4B4D_4541;
    pub const TOPOLOGY: u64 = 0x544F_504F;
    pub const BATCH: u64 = 0x4241_5443;
    pub const ORDER: u64 = 0x4F52_4445;
    pub const NOISE: u64 = 0x4E4F_4953;
    pub const SUBSET: u64 = 0x5355_4253;
    pub const WARMUP: u64 = 0x5741_524D;
    pub const PRIVACY: u64 = 0x5052_4956;
}
