//! Seeded RNG streams.
//!
//! Every randomized component draws from a [`ChaCha12Rng`] derived from the
//! run seed plus a purpose label, so that streams are independent of each
//! other and of iteration order. Deriving by label (rather than drawing
//! sub-seeds sequentially) keeps per-item noise reproducible under batch
//! reordering.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream from a master seed and a label.
pub fn stream(seed: u64, label: &str) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha12Rng::from_seed(key)
}

/// Derive a stream keyed by an integer id (e.g. a sequence or item index).
pub fn stream_indexed(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    stream(seed, &format!("{label}/{index}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "x").gen();
        let b: u64 = stream(7, "x").gen();
        let c: u64 = stream(7, "y").gen();
        let d: u64 = stream(8, "x").gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn indexed_streams_do_not_collide_with_plain_labels() {
        let a: u64 = stream_indexed(1, "item", 2).gen();
        let b: u64 = stream(1, "item/2").gen();
        // same derivation by construction
        assert_eq!(a, b);
        let c: u64 = stream_indexed(1, "item", 3).gen();
        assert_ne!(a, c);
    }
}
