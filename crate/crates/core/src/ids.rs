//! Stable mock token ids and payload digests.

use sha2::{Digest, Sha256};

/// Mock vocabulary size shared by every head.
pub const MOCK_VOCAB: u64 = 65_536;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic token id for `(seed, domain, a, b)`.
pub fn token_id(seed: u64, domain: u64, a: u64, b: u64) -> u32 {
    let h = splitmix(splitmix(splitmix(seed ^ domain.rotate_left(48)) ^ a) ^ b);
    (h % MOCK_VOCAB) as u32
}

/// First 16 hex chars of the SHA-256 of `bytes`.
pub fn digest(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    hex::encode(&full[..8])
}
