//! Seeded RNG streams.
//!
//! Every random decision draws from a ChaCha stream keyed by `(seed, key)`,
//! so per-entity generation does not depend on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `key` under run seed `seed`.
pub fn stream(seed: u64, key: u64) -> Rng {
    Rng::seed_from_u64(stream_seed(seed, key))
}

/// The 64-bit seed behind [`stream`], for APIs that take a plain seed.
pub fn stream_seed(seed: u64, key: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ key)
}

/// Stream keys for the distinct consumers of randomness within one run.
pub mod keys {
    pub const SURFACES: u64 = 0x5355_5246;
    pub const SPLIT: u64 = 0x5350_4C54;
    pub const DERANGE: u64 = 0x4445_5241;
    pub const ENTITY_BASE: u64 = 0x1_0000_0000;
    pub const INIT: u64 = 0x494E_4954;
    pub const SHUFFLE_BASE: u64 = 0x2_0000_0000;
    pub const PROBE: u64 = 0x5052_4F42;
    pub const PERMUTATION: u64 = 0x5045_524D;
}

pub fn entity_stream(seed: u64, entity_id: u32) -> Rng {
    stream(seed, keys::ENTITY_BASE + entity_id as u64)
}
