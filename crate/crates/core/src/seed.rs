//! Stable seed derivation.
//!
//! Every stochastic stage draws from its own generator, seeded from a parent
//! seed and a label. Changing how one stage consumes randomness never shifts
//! the stream another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derive a child seed from `parent` and a stage label.
pub fn derive(parent: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(parent.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Derive a child seed from `parent`, a label and an index (replicate, query id, epoch).
pub fn derive_indexed(parent: u64, label: &str, index: u64) -> u64 {
    derive(derive(parent, label), &index.to_string())
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
