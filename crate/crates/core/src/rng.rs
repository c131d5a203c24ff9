//! Seed derivation. Every random stream in a run comes from the single
//! top-level seed combined with a stream name and an index, so one integer
//! reproduces a whole run regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `splitmix64(seed ^ fnv1a(name) ^ splitmix64(index))`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h ^ splitmix64(index))
}

pub fn stream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name, index))
}
