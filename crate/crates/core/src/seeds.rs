//! Deterministic derivation of independent RNG streams from a base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the crate.
pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index into a new seed.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for byte in tag.bytes() {
        h = splitmix64(h ^ u64::from(byte));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn stream(base: u64, tag: &str, index: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(base, tag, index))
}
