//! Named seed substreams.
//!
//! Every consumer of randomness receives a [`SeedStream`] derived from the
//! experiment's master seed plus a path of names. Two streams with the same
//! (seed, path) produce identical sequences regardless of the order in which
//! they are created, which keeps results independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedStream {
    seed: u64,
    path: String,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: String::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    /// Derive a child stream. `child` is appended to the path with a `/`.
    pub fn child(&self, name: impl AsRef<str>) -> Self {
        let path = if self.path.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}/{}", self.path, name.as_ref())
        };
        Self {
            seed: self.seed,
            path,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(self.path.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }
}
