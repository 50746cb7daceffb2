//! Pipeline embeddings with a deep-kernel GP surrogate for Bayesian
//! optimization over tabular pipeline meta-datasets.

pub mod analysis;
pub mod bo;
pub mod error;
pub mod gp;
pub mod metadata;
pub mod network;
pub mod space;
pub mod train;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` of the generator seeded by
/// `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
