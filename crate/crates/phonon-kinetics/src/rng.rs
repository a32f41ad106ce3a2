//! Seeded random streams.
//!
//! Every sample, particle or ensemble member draws from its own stream,
//! derived from the run seed and its index, so results do not depend on
//! how work is partitioned between threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
