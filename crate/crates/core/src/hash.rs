//! 64-bit FNV-1a content hashing shared by the checkpoint trailer, ledger
//! lines and delta fingerprints.

use std::hash::Hasher;

use fnv::FnvHasher;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Fingerprint of a float vector: FNV-1a over its little-endian bytes.
pub fn hash_f64s(values: &[f64]) -> u64 {
    let mut h = FnvHasher::default();
    for v in values {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

pub fn to_hex(h: u64) -> String {
    format!("{h:016x}")
}

pub fn from_hex(s: &str) -> Option<u64> {
    if s.len() != 16 {
        return None;
    }
    u64::from_str_radix(s, 16).ok()
}
