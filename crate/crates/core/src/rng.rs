//! Seeded random number generation.
//!
//! Every random draw in the engine (initialization, shuffling, synthetic
//! data) comes from ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! The identifier below is written into checkpoints so a reader can tell
//! which generator produced a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier of the generator and the sampling code paths layered on it.
pub const RNG_ALGORITHM: &str = "chacha8/rand-0.9";

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
