//! Seed derivation and content hashing.
//!
//! Every random stream in the pipeline is seeded from the master seed through
//! [`derive_seed`], so outputs depend only on (config, master seed) and never on
//! thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The generator used for every stream in the crate.
pub type Rng = ChaCha8Rng;

/// `seed(component, index)`: the first eight bytes (little-endian) of
/// SHA-256 over `master.to_le_bytes() || component || 0x00 || index.to_le_bytes()`.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(component.as_bytes());
    hasher.update([0u8]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Short content hash (first 16 hex chars of SHA-256) used for ids.
pub fn content_id(bytes: &[u8]) -> String {
    let mut full = sha256_hex(bytes);
    full.truncate(16);
    full
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn derived_seed_vectors_are_pinned() {
        // Computed independently with Python's hashlib:
        // int.from_bytes(sha256(m.to_bytes(8,'little') + name + b'\0' + i.to_bytes(8,'little')).digest()[:8], 'little')
        assert_eq!(derive_seed(0, "data", 0), 0x2891_00ea_cf23_a694);
        assert_eq!(derive_seed(42, "eval", 7), 0x7984_6c49_4e35_df17);
        assert_eq!(derive_seed(u64::MAX, "po-trial", 123), 0xd2cf_6a7d_fd1e_c505);
    }

    #[test]
    fn components_and_indices_separate_streams() {
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(1, "b", 0));
        assert_ne!(derive_seed(1, "a", 0), derive_seed(2, "a", 0));
    }

    #[test]
    fn rng_is_reproducible() {
        let a: Vec<u64> = (0..4).map({
            let mut r = rng_from_seed(9);
            move |_| r.gen()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = rng_from_seed(9);
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn sha256_known_answer() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(content_id(b"abc"), "ba7816bf8f01cfea");
    }
}
