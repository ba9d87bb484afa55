//! The single seeded generator used throughout: ChaCha with 8 rounds from
//! `rand_chacha`, seeded through `seed_from_u64`. Gaussians come from
//! `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type SeededRng = ChaCha8Rng;

/// Recorded in every run report.
pub const PRNG_NAME: &str = "ChaCha8Rng/seed_from_u64 (rand_chacha 0.9)";

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose so that adding draws
/// to one stream never shifts another.
pub fn substream(seed: u64, purpose: &str) -> SeededRng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

pub fn gaussian(rng: &mut SeededRng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    z * std
}
