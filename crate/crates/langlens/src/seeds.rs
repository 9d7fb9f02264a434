//! Seed derivation.
//!
//! All randomness in the crate flows from a single top-level `u64` seed.
//! Sub-seeds are derived by hashing the master seed together with a string
//! label, so adding a new consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive a labelled sub-seed from a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// A ChaCha20 generator keyed by `(master, label)`.
///
/// ChaCha20 has a stable, portable stream; the same key yields the same
/// sequence on every platform.
pub fn rng_for(master: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, label))
}

/// Hex-encoded SHA-256 of a byte slice, used for provenance records.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
