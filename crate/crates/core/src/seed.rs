//! Stable seed derivation.
//!
//! Every random draw in the crate is keyed by content (ids, feature names,
//! user seeds) rather than by processing order, so parallel and serial runs
//! agree bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// One component of a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    U64(u64),
    Str(&'a str),
}

impl From<u64> for SeedPart<'_> {
    fn from(v: u64) -> Self {
        SeedPart::U64(v)
    }
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(v: &'a str) -> Self {
        SeedPart::Str(v)
    }
}

/// Hashes the parts with SHA-256 and returns the first 8 bytes, little endian.
///
/// Parts are tagged and length-prefixed, so `("ab", "c")` and `("a", "bc")`
/// never collide.
pub fn derive_seed(parts: &[SeedPart<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(b"biasprobe/v1");
    for part in parts {
        match part {
            SeedPart::U64(v) => {
                hasher.update([0u8]);
                hasher.update(v.to_le_bytes());
            }
            SeedPart::Str(s) => {
                hasher.update([1u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parts: &[SeedPart<'_>]) -> ChaCha8Rng {
    rng_from(derive_seed(parts))
}

/// A uniform draw on `[0, 1)` that is a pure function of `parts`.
pub fn unit_uniform(parts: &[SeedPart<'_>]) -> f64 {
    // 53 high bits give every representable multiple of 2^-53.
    (derive_seed(parts) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
