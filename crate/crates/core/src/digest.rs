//! 256-bit content hashes used to chain artifacts together.

use sha2::{Digest as _, Sha256};

pub type Digest = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

pub fn to_hex(d: &Digest) -> String {
    hex::encode(d)
}

pub fn from_hex(s: &str) -> Option<Digest> {
    let bytes = hex::decode(s).ok()?;
    bytes.try_into().ok()
}
