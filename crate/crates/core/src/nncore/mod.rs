//! Minimal dense neural-network substrate: matrices, an MLP split into a
//! feature extractor and a classifier head, batch normalization,
//! hand-derived gradients and SGD.

mod matrix;
mod model;
mod pass;

pub use matrix::Matrix;
pub use model::{copy_model, Dense, ModelParams, Norm, NORM_EPSILON, NORM_MOMENTUM};
pub use pass::{backward, sgd_step, Batch, DenseGrad, ForwardPass, Gradients, Mode, NormGrad};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every seeded draw in the crate.
pub type SimRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Mixes a base seed with a list of tags into an independent stream seed
/// (splitmix64 finalizer over each word).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    tags.iter().fold(mix(base), |acc, &t| mix(acc ^ mix(t)))
}
