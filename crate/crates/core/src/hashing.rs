//! Content hashing for fingerprints and provenance records.

use sha2::{Digest, Sha256};

/// 64-bit content hash: first eight bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Hash rendered as a fixed-width hex string for report fields.
pub fn hex16(h: u64) -> String {
    format!("{h:016x}")
}

/// Incremental variant for hashing structured content without
/// materializing one big buffer.
pub struct Hasher {
    inner: Sha256,
}

impl Hasher {
    pub fn new() -> Self {
        Self { inner: Sha256::new() }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.inner.update(bytes);
    }

    pub fn update_f64s(&mut self, values: &[f64]) {
        for v in values {
            self.inner.update(v.to_le_bytes());
        }
    }

    pub fn finish(self) -> u64 {
        let digest = self.inner.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

impl Default for Hasher {
    fn default() -> Self {
        Self::new()
    }
}
