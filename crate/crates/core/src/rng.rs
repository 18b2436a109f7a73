//! Seeded random streams.
//!
//! Every random decision in the toolkit draws from a ChaCha stream whose key is
//! derived from a master seed, a label naming the stage, and any number of
//! identifying parts (question id, sample index, replicate index...). The
//! derivation goes through SHA-256 so it is stable across platforms, thread
//! counts and execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The RNG type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Derive an independent stream from `(seed, label, parts)`.
pub fn stream(seed: u64, label: &str, parts: &[&[u8]]) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let key: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(key)
}

/// Derive a child seed, used when one configured seed fans out into several stages.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label, &[]).next_u64()
}
