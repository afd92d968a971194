//! Deterministic seed derivation.
//!
//! Every stochastic step in the crate draws from a ChaCha stream whose seed
//! is derived from a base seed plus the identifiers of the step (fold index,
//! tree index, epoch, ...). Derivation is a fixed mixing function, so the
//! same (seed, identifiers) always produces the same stream regardless of
//! execution order, and distinct identifiers decorrelate streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-period mixer with good avalanche behavior.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and an ordered list of stream labels.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = mix(base ^ 0xa076_1d64_78bd_642f);
    for &p in parts {
        h = mix(h ^ mix(p));
    }
    h
}

/// Hashes a string label into a stream id for [`derive_seed`].
pub fn label(s: &str) -> u64 {
    // FNV-1a, enough to separate the handful of fixed labels we use.
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// The crate-wide RNG. ChaCha keeps streams portable across platforms and
/// rust versions, unlike hash-based or OS RNGs.
pub type Rng = ChaCha8Rng;

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
