//! Seed derivation.
//!
//! Every random draw in the engine comes from a ChaCha stream whose seed is a
//! splitmix64 fold of `(seed, key...)`. Keys name the purpose and the entity
//! (task id, agent id, ...) so that streams are independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const PURPOSE_QUERY: u64 = 0x5155_4552;
pub const PURPOSE_LABEL: u64 = 0x4c41_4245;
pub const PURPOSE_AGENT: u64 = 0x4147_454e;
pub const PURPOSE_DISTRACTOR: u64 = 0x4449_5354;
pub const PURPOSE_WRONG_ANSWER: u64 = 0x5752_4f4e;
pub const PURPOSE_EMBED_PAD: u64 = 0x5041_4444;
pub const PURPOSE_INIT: u64 = 0x494e_4954;
pub const PURPOSE_SHUFFLE: u64 = 0x5348_5546;
pub const PURPOSE_CHAIN: u64 = 0x4348_4149;
pub const PURPOSE_GRADCHECK: u64 = 0x4752_4144;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Folds a sequence of keys into one 64-bit seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, keys))
}
