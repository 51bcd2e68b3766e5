//! Deterministic seed derivation.
//!
//! Every independent unit of work (an annotator, a replicate, an item inside a
//! replicate, a training job) draws from its own generator whose seed is a
//! pure function of the master seed and the unit's identity. Results are
//! therefore independent of evaluation order and thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Generator used throughout the crate.
pub type Rng = ChaCha8Rng;

/// A component of a derived seed path.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Tag(&'a str),
    Index(u64),
}

impl<'a> From<&'a str> for SeedPart<'a> {
    fn from(s: &'a str) -> Self {
        SeedPart::Tag(s)
    }
}

impl From<u64> for SeedPart<'_> {
    fn from(i: u64) -> Self {
        SeedPart::Index(i)
    }
}

impl From<usize> for SeedPart<'_> {
    fn from(i: usize) -> Self {
        SeedPart::Index(i as u64)
    }
}

/// Hash a master seed together with a path of tags and indices.
///
/// The encoding is length-prefixed so that `["ab", "c"]` and `["a", "bc"]`
/// derive different seeds.
pub fn derive_seed(master: u64, parts: &[SeedPart<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in parts {
        match part {
            SeedPart::Tag(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            SeedPart::Index(i) => {
                hasher.update([1u8]);
                hasher.update(i.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Shorthand for `rng_from_seed(derive_seed(master, parts))`.
pub fn derived_rng(master: u64, parts: &[SeedPart<'_>]) -> Rng {
    rng_from_seed(derive_seed(master, parts))
}
