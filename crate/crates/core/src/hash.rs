//! Content hashes used to tie artifacts to the configuration that made them.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Hex digits kept from the SHA-256 digest.
pub const HASH_LEN: usize = 16;

/// SHA-256 of the compact JSON encoding, truncated to [`HASH_LEN`] hex digits.
/// Struct fields serialize in declaration order, so the encoding is stable.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(bytes_hash(&json))
}

pub fn bytes_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = hex::encode(digest);
    s.truncate(HASH_LEN);
    s
}

/// Full-length hex SHA-256, for file fingerprints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        #[derive(Serialize)]
        struct C {
            a: f64,
            b: u32,
        }
        let h1 = config_hash(&C { a: 0.1, b: 2 }).unwrap();
        assert_eq!(h1, config_hash(&C { a: 0.1, b: 2 }).unwrap());
        assert_ne!(h1, config_hash(&C { a: 0.1, b: 3 }).unwrap());
        assert_eq!(h1.len(), HASH_LEN);
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
