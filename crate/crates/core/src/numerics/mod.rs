//! Dense numeric core: small feed-forward networks with explicit gradients,
//! classification losses, Adam, and a two-component PCA used for plots.
//!
//! Everything is `f64` and single-threaded; results are a pure function of
//! the inputs and the seeded generator passed in.

mod adam;
mod loss;
mod mlp;
mod pca;

pub use adam::{adam_step, AdamState};
pub use loss::{cross_entropy, softmax_rows, squared_error, LossKind};
pub use mlp::{
    backprop, backward, forward, forward_trace, Activation, Batch, Dense, Gradients, Mode,
    ModelParams, Trace,
};
pub use pca::{pca2, Pca2};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Seeded generator.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a path of integers into a new, well-spread seed
/// (splitmix64 finalizer over each component).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Index of the largest entry of each row; ties resolve to the lowest index.
pub fn argmax_rows(m: &ndarray::Array2<f64>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
