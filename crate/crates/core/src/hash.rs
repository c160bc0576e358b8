//! Content hashing for provenance fields in reports and manifests.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Hex digest (first 16 chars of SHA-256) of a config's canonical JSON.
/// Field order follows struct declaration order, so equal configs hash
/// equally across runs and platforms.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(16);
    for b in digest.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
