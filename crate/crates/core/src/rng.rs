//! Per-particle random streams.
//!
//! Particle `i` of a run with seed `s` draws from ChaCha8 keyed by `s` on
//! stream `i`, one standard normal per time step. Streams do not depend on
//! how particles are scheduled, so results are reproducible for any number
//! of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn particle_stream(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

/// Derives an independent seed for a sub-run (for example the second,
/// importance-sampled phase of the decoupled algorithm).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
