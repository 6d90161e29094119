//! Named child random streams derived from one root seed.
//!
//! Each component draws from its own stream (`"data"`, `"model-init"`,
//! `"swd-slices"`, `"shuffle"`, ...) so that changing how much one component
//! consumes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the stream name.
fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Seed of the child stream `name` under `seed`.
pub fn child_seed(seed: u64, name: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ name_hash(name))
}

pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(seed, name))
}
