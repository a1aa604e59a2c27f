//! Named random substreams derived from a single run seed.
//!
//! Every consumer of randomness (data generation, initialization, batch
//! drawing) gets its own ChaCha stream keyed by `(seed, name)`, so changing
//! how one component draws numbers never shifts another component's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream for dataset generation.
pub const DATA: &str = "data";
/// Stream for parameter initialization.
pub const INIT: &str = "init";
/// Stream for mini-batch sampling.
pub const BATCHING: &str = "batching";

pub fn substream(seed: u64, name: &str) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Substream for an indexed item (e.g. one frame) inside a named stream.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    substream(seed, &format!("{name}/{index}"))
}
