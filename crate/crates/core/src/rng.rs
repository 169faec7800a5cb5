//! Seeded random streams. Every stochastic component draws from a
//! [`ChaCha8Rng`] derived from a user seed and a stream label, so results do
//! not depend on call order across components.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

/// Derives an independent generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const SYNTH: u64 = 4;
    pub const LATENCY_INPUT: u64 = 5;
}
