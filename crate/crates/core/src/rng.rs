//! Seeded random streams derived from a master seed and a purpose label.
//!
//! Deriving per-purpose streams keeps every component reproducible on its
//! own and independent of how much randomness other components consume.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic RNG for `(master_seed, label)`.
pub fn stream(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Stream for an indexed sub-task such as one teacher or one eval seed.
pub fn indexed_stream(master_seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(master_seed, &format!("{label}/{index}"))
}
