//! Deterministic text encoding used for hashing and for protocol payloads.
//!
//! Canonical form is compact JSON with object keys in lexicographic order,
//! UTF-8, no insignificant whitespace. Hashes over structured data are always
//! taken over these bytes.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Encodes `value` canonically.
pub fn to_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    // serde_json::Value keeps object keys in a BTreeMap, so going through it
    // sorts every level.
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

pub fn to_string<T: Serialize + ?Sized>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}

/// Re-encodes arbitrary JSON text canonically.
pub fn canonicalize_json(text: &str) -> Result<Vec<u8>, serde_json::Error> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    serde_json::to_vec(&v)
}
