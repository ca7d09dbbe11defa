//! Stage seeds derived from one master seed.
//!
//! `derive_seed(master, label)` is the first 8 bytes (little endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Labels are stage names such as
//! `"synth"`, `"style"`, `"prior"`, `"policy"`, `"baseline/mse"`, `"eval-f1/3"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(master: u64, label: &str) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, label))
}

/// Per-item stream for item `index` of a stage.
pub fn item_rng(stage_seed: u64, index: usize) -> SimRng {
    let mut rng = SimRng::seed_from_u64(stage_seed);
    rng.set_stream(index as u64 + 1);
    rng
}
