//! Deterministic seed derivation.
//!
//! One root seed per run; every randomized unit of work (an attribute
//! training, an OvR class fit, a per-utterance explanation) derives its own
//! generator from `(root, scope, index)` by hashing. Results are therefore
//! independent of scheduling and worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// 32-byte seed derived from the run seed, a scope string, and an index.
pub fn derive_seed(root: u64, scope: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(scope.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// Seeded generator for one unit of work.
pub fn derive_rng(root: u64, scope: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(derive_seed(root, scope, index))
}

/// First eight bytes of the derived seed, for APIs that take a `u64`.
pub fn derive_u64(root: u64, scope: &str, index: u64) -> u64 {
    let s = derive_seed(root, scope, index);
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn derivation_is_stable() {
        assert_eq!(derive_seed(7, "a", 0), derive_seed(7, "a", 0));
        assert_ne!(derive_seed(7, "a", 0), derive_seed(7, "a", 1));
        assert_ne!(derive_seed(7, "a", 0), derive_seed(7, "b", 0));
        assert_ne!(derive_seed(7, "a", 0), derive_seed(8, "a", 0));
    }

    #[test]
    fn derived_rngs_are_independent_streams() {
        let mut a = derive_rng(1, "x", 0);
        let mut b = derive_rng(1, "x", 0);
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
