//! Named, reproducible random sub-streams derived from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random generator used everywhere in the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives the seed of sub-stream `name` from a root seed.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(fnv1a(name)))
}

/// Derives the seed of the `index`-th member of sub-stream `name`.
pub fn derive_indexed(seed: u64, name: &str, index: u64) -> u64 {
    splitmix64(derive_seed(seed, name) ^ splitmix64(index.wrapping_add(1)))
}

/// Generator for sub-stream `name` of `seed`.
pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, name))
}

pub fn indexed_stream(seed: u64, name: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, name, index))
}
