//! Deterministic seed derivation.
//!
//! Streams are keyed by stable integer mixing so that results do not depend on
//! the standard library's hasher or on iteration order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::Matrix;

/// The splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines several integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stream generator for a derived seed.
pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// Content key of every row, so per-point randomness follows the point
/// rather than its position in a batch.
pub fn row_keys(x: &Matrix) -> Vec<u64> {
    (0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .fold(0xC0FF_EE00_u64, |acc, v| mix64(acc ^ v.to_bits()))
        })
        .collect()
}
