//! Seed derivation for independently reproducible sub-streams.
//!
//! Every random decision in the pipeline draws from a ChaCha stream whose seed
//! is a SHA-256 digest of the master seed and a tag path, so reordering one
//! phase never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// One component of a derivation path.
#[derive(Debug, Clone, Copy)]
pub enum Tag<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for Tag<'a> {
    fn from(s: &'a str) -> Self {
        Tag::Str(s)
    }
}

impl From<u64> for Tag<'_> {
    fn from(v: u64) -> Self {
        Tag::Int(v)
    }
}

impl From<usize> for Tag<'_> {
    fn from(v: usize) -> Self {
        Tag::Int(v as u64)
    }
}

/// Hash `(master, tags...)` into a new 64-bit seed.
pub fn derive_seed(master: u64, tags: &[Tag<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for tag in tags {
        match tag {
            Tag::Str(s) => {
                hasher.update([0u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
            Tag::Int(v) => {
                hasher.update([1u8]);
                hasher.update(v.to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(master: u64, tags: &[Tag<'_>]) -> Rng {
    rng(derive_seed(master, tags))
}
