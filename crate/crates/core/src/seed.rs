//! Seed derivation. Every random stream in a run is keyed by hashing the
//! root seed with a list of labels, so cells can be reproduced in isolation.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}
