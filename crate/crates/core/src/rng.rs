//! Seeded random streams. Every consumer receives an explicit generator
//! keyed by `(seed, stream)`, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type GpRng = ChaCha20Rng;

pub fn rng_from_seed(seed: u64) -> GpRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> GpRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
