//! Deterministic seed derivation.
//!
//! Every stochastic stage (shuffling, initialization, noise, paraphrase
//! sampling) owns an independent RNG seeded through [`derive`], so stages
//! never share or race on a stream. Derivation is a SHA-256 hash of the
//! base seed and a stage label, making streams stable across platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a base seed and a stage label.
pub fn derive(base: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Derive a child seed salted with a numeric index (epoch, step, sample).
pub fn derive_indexed(base: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Deterministic RNG used throughout; ChaCha keeps streams identical on
/// every platform regardless of word size.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
