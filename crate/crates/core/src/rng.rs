//! Seeded random streams.
//!
//! Every stochastic operation derives its generator from a base seed plus a
//! stream index, so results never depend on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generator for a two-level key, e.g. `(epoch, sample position)`.
pub fn substream(seed: u64, outer: u64, inner: u64) -> Rng {
    stream(seed ^ outer.wrapping_mul(0x9E37_79B9_7F4A_7C15), inner)
}
