//! Seeded RNG streams.
//!
//! Every stochastic component draws from a ChaCha8 stream derived from the
//! pipeline seed, a stage label, and an index. Derivation goes through
//! SHA-256 so streams for different labels never overlap and adding a new
//! consumer cannot shift the draws of an existing one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from (seed, label, index).
pub fn stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
