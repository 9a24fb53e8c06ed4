//! Deterministic, labelled random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The random-stream handle used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Returns an independent stream keyed by `(seed, label)`.
///
/// The 256-bit ChaCha key is the SHA-256 digest of the seed bytes followed by
/// the label, so distinct labels give unrelated streams under one seed.
pub fn rng_stream(seed: u64, label: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
