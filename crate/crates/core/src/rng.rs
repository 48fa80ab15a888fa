//! Seeded random streams.
//!
//! Every random draw in the crate goes through ChaCha20 keyed by a 64-bit
//! seed. Independent replicates use distinct stream ids of the same key, so
//! results do not depend on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type DesignRng = ChaCha20Rng;

pub fn stream(seed: u64, stream: u64) -> DesignRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
