//! Keyed deterministic random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose key is
//! derived from `(seed, index, tag)`, so any single case or epoch can be
//! regenerated without replaying the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn keyed_rng(seed: u64, index: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stable 64-bit sub-seed for handing to APIs that take a plain integer seed.
pub fn derive_seed(seed: u64, index: u64, tag: &str) -> u64 {
    use rand::RngCore;
    keyed_rng(seed, index, tag).next_u64()
}
