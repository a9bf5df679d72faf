//! Deterministic seed fan-out.
//!
//! A single global seed is expanded into independent per-stage streams by
//! hashing `(root, label, index)` with SHA-256. The derivation is stable
//! across platforms and releases, so any stage can be rerun in isolation
//! and reproduce its bytes exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a child seed from a root seed, a stage label and an index.
pub fn derive(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update([0x1f]);
    h.update(label.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest >= 8 bytes"))
}

/// Seeded RNG for a `(root, label, index)` triple.
pub fn rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, index))
}
