//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a stream keyed by
//! `(seed, purpose, level, index)`. Two streams with the same key produce the
//! same numbers no matter what else was drawn before, which is what makes
//! neighbor replacement and coupled trajectories reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the key, so streams for different
/// purposes never collide even with equal seeds and counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Per-sample payloads of a generated dataset.
    Data = 1,
    /// Fixed structure of a generated problem (base maps, true coefficients).
    Structure = 2,
    /// Replacement samples for neighboring datasets.
    Neighbor = 3,
    /// Minibatch index draws inside optimizer runs.
    Indices = 4,
    /// Train/test assignment and similar bookkeeping.
    Split = 5,
    /// Monte-Carlo draws used by estimators of variance terms.
    MonteCarlo = 6,
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 256-bit ChaCha key from the stream key.
fn derive_seed(seed: u64, purpose: Purpose, level: u64, index: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    let mut h = mix(seed);
    h = mix(h ^ purpose as u64);
    h = mix(h ^ level);
    h = mix(h ^ index);
    for (i, chunk) in out.chunks_exact_mut(8).enumerate() {
        let word = mix(h ^ (i as u64).wrapping_mul(0xA076_1D64_78BD_642F));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    out
}

/// Opens the stream for `(seed, purpose, level, index)`.
pub fn stream(seed: u64, purpose: Purpose, level: usize, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(seed, purpose, level as u64, index))
}
