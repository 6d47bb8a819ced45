//! Labeled seed derivation.
//!
//! Every component seed is a hash of the base seed and a label path, so adding
//! a new consumer of randomness never shifts the seeds of existing ones.

use sha2::{Digest, Sha256};

/// Derives a sub-seed from `base` and a label such as `"init"` or `"run/3"`.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"cyclebalance-seed\0");
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// `derive_seed` over a multi-part label joined with `/`.
pub fn derive_seed_path(base: u64, parts: &[&str]) -> u64 {
    derive_seed(base, &parts.join("/"))
}
