//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream names used throughout the pipeline.
pub const ENV: &str = "env";
pub const TRAIN: &str = "train";
pub const ATTACK: &str = "attack";
pub const EVAL: &str = "eval";

/// `sha256(master ‖ stream ‖ index)` truncated to 64 bits.
pub fn derive(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng(master: u64, stream: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive(master, stream, index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
