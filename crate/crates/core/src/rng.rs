//! Deterministic random streams.
//!
//! All randomness in the crate is drawn from ChaCha8, a counter-based
//! generator whose output is specified bit-for-bit and therefore identical on
//! every platform. Independent streams (ensemble members, per-window forecast
//! draws) are derived from a root seed by selecting a ChaCha stream id, so
//! member `i` never depends on how many other members exist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `stream` of the generator keyed by `(seed, key)`.
pub fn stream(seed: u64, key: u64, stream: u64) -> Prng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Prng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut Prng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
