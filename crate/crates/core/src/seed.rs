//! Deterministic seed derivation.
//!
//! Seeds are derived by hashing, never by call order, so rollouts produce
//! the same samples no matter how the worker pool schedules them.

use sha2::{Digest, Sha256};

/// Derives a child seed from `base` and an ordered list of labels.
///
/// Each label is length-prefixed before hashing, so `("ab", "c")` and
/// `("a", "bc")` map to different seeds.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(word)
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
