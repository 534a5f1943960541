//! Hashing, seed derivation and file helpers shared by every module.

use std::path::Path;

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_extend(FNV_OFFSET, bytes)
}

pub fn fnv1a_extend(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hash of the little-endian bytes of an `f32` slice.
pub fn hash_f32(values: &[f32]) -> u64 {
    values
        .iter()
        .fold(FNV_OFFSET, |h, v| fnv1a_extend(h, &v.to_le_bytes()))
}

/// Independent seed for a named purpose, so RNG streams do not interfere.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    let mut h = fnv1a_extend(FNV_OFFSET, &base.to_le_bytes());
    h = fnv1a_extend(h, purpose.as_bytes());
    h = fnv1a_extend(h, &index.to_le_bytes());
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// `round(ratio * n)` with halves rounded up.
pub fn round_half_up(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5 + 1e-9).floor() as usize
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}
