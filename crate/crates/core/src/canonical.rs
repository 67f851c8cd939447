//! Canonical JSON serialization and content digests.
//!
//! Canonical form: UTF-8, object keys sorted lexicographically by byte, no
//! insignificant whitespace, floats rendered as the shortest string that
//! round-trips. Topic bodies additionally have every string value trimmed with
//! internal whitespace runs collapsed to a single space.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Name of the digest recorded in artifact files.
pub const DIGEST_ALGORITHM: &str = "sha256";

pub fn to_canonical_value<T: Serialize>(value: &T) -> serde_json::Result<Value> {
    // serde_json's default `Map` is a BTreeMap, so keys come out sorted.
    serde_json::to_value(value)
}

pub fn to_canonical_bytes<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let v = to_canonical_value(value)?;
    serde_json::to_vec(&v)
}

pub fn to_canonical_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = to_canonical_value(value)?;
    serde_json::to_string(&v)
}

/// Collapses whitespace in every string of a JSON tree.
pub fn normalize_whitespace(value: &mut Value) {
    match value {
        Value::String(s) => {
            let collapsed = collapse_ws(s);
            if collapsed != *s {
                *s = collapsed;
            }
        }
        Value::Array(items) => items.iter_mut().for_each(normalize_whitespace),
        Value::Object(map) => map.values_mut().for_each(normalize_whitespace),
        _ => {}
    }
}

pub fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical serialization of `value`.
pub fn digest_of<T: Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(sha256_hex(&to_canonical_bytes(value)?))
}
