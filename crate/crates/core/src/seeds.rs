//! Stable sub-seed derivation. Every random stream in the engine is keyed by
//! a root seed plus a label, so results never depend on iteration order.

use sha2::{Digest, Sha256};

pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}
