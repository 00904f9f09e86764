//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from one
//! run seed, so draws in one place never shift draws in another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Stream used for parameter initialization.
pub const STREAM_INIT: u64 = 0;
/// Stream used for epoch shuffling and replay draws.
pub const STREAM_TRAIN: u64 = 1;
/// Stream used by the replay buffer's reservoir decisions.
pub const STREAM_BUFFER: u64 = 2;
/// Stream used for class-order permutation.
pub const STREAM_SPLIT: u64 = 3;
/// Stream used for synthetic data generation.
pub const STREAM_DATA: u64 = 4;

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a 64-bit seed from a master seed and a textual descriptor.
pub fn derive_seed(master: u64, descriptor: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(descriptor.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = seeded(7, STREAM_TRAIN).random();
        let b: u64 = seeded(7, STREAM_TRAIN).random();
        let c: u64 = seeded(7, STREAM_BUFFER).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derived_seed_depends_on_both_inputs() {
        assert_eq!(derive_seed(1, "er/im/5"), derive_seed(1, "er/im/5"));
        assert_ne!(derive_seed(1, "er/im/5"), derive_seed(2, "er/im/5"));
        assert_ne!(derive_seed(1, "er/im/5"), derive_seed(1, "er/im/10"));
    }
}
