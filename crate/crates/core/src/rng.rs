//! Counter-based random streams.
//!
//! A [`RngState`] names a ChaCha20 keystream: the key is derived from the root
//! seed and the stream id selects an independent 64-bit nonce. Child streams
//! are obtained by hashing a text label into a new stream id, so the draws a
//! component sees depend only on its label path, never on how many numbers
//! other components consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Derives a child stream identified by `label`.
    pub fn split(&self, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.stream.to_le_bytes());
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
        let digest = hasher.finalize();
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        Self {
            seed: self.seed,
            stream: u64::from_le_bytes(head),
        }
    }

    /// Generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha20Rng {
        let mut key = [0u8; 32];
        let digest = Sha256::digest(self.seed.to_le_bytes());
        key.copy_from_slice(&digest);
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(self.stream);
        rng
    }
}

/// Free-function form of [`RngState::split`].
pub fn split_rng(root: RngState, label: &str) -> RngState {
    root.split(label)
}
