//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is addressed by a base seed plus a
//! path of integer tags (dataset index, stage, restart, ...). Streams are
//! derived by hashing, never by advancing a shared generator, so results do
//! not depend on execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used for every stream in the crate.
pub type StreamRng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a base seed and a tag path into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |h, &t| splitmix64(h ^ splitmix64(t.wrapping_add(GOLDEN))))
}

/// Stages of dataset generation; each gets an independent stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    Covariates = 1,
    Assignment = 2,
    TrustCovariate = 3,
    Noise = 4,
}

/// Tags for the non-simulation consumers of randomness.
pub mod tag {
    pub const DATASET: u64 = 0x_D5;
    pub const RESTART: u64 = 0x_E5;
    pub const FIT: u64 = 0x_F1;
}

pub fn stage_rng(seed: u64, stage: Stage) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, &[stage as u64]))
}

pub fn rng_from(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
