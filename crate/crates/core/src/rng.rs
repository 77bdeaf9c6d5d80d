//! Seeded random streams.
//!
//! Streams are addressed by `(seed, purpose, index)` so that a component can
//! recreate its generator from a checkpoint without storing generator
//! internals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream purposes. Values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Partition = 2,
    Split = 3,
    Subset = 4,
    Synthetic = 5,
    MiniBatch = 6,
    Theory = 7,
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let key = mix(mix(seed) ^ mix(purpose as u64).rotate_left(17) ^ mix(index.wrapping_add(0xA5A5)));
    ChaCha8Rng::seed_from_u64(key)
}
