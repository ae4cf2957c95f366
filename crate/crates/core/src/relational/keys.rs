use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{ClientId, HorizontalPartition};

/// One-way transform applied to join keys before they leave a client.
pub trait KeyHasher {
    fn hash_key(&self, key: &str) -> String;
}

/// SHA-256 of the UTF-8 key bytes, hex encoded.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sha256KeyHasher;

impl KeyHasher for Sha256KeyHasher {
    fn hash_key(&self, key: &str) -> String {
        let digest = Sha256::digest(key.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest.iter() {
            write!(out, "{b:02x}").unwrap();
        }
        out
    }
}

/// `(join_key, row_id)` columns sent by a client during mapping construction.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyMessage {
    pub owner: ClientId,
    pub table: String,
    pub hashed: bool,
    /// Key tuple per row; `row_ids[k]` is the local row of `keys[k]`.
    pub keys: Vec<Vec<String>>,
    pub row_ids: Vec<usize>,
    pub labels: Option<Vec<f64>>,
}

impl KeyMessage {
    pub fn num_rows(&self) -> usize {
        self.row_ids.len()
    }

    /// Wire size: key bytes, a `u64` row id per row and an `f64` per label.
    pub fn wire_bytes(&self) -> u64 {
        let key_bytes: usize = self.keys.iter().flatten().map(String::len).sum();
        let labels = self.labels.as_ref().map_or(0, Vec::len);
        (key_bytes + 8 * self.row_ids.len() + 8 * labels) as u64
    }

    /// `(key tuple, row id)` pairs in row order.
    pub fn pairs(&self) -> impl Iterator<Item = (&[String], usize)> {
        self.keys.iter().map(Vec::as_slice).zip(self.row_ids.iter().copied())
    }
}

/// Extracts the key columns of a partition, optionally hashing every key.
///
/// Empty key cells stay empty so that they keep joining nothing.
pub fn extract_key_columns(part: &HorizontalPartition, hasher: Option<&dyn KeyHasher>) -> KeyMessage {
    let keys = part
        .keys
        .iter()
        .map(|row| {
            row.iter()
                .map(|k| match hasher {
                    Some(h) if !k.is_empty() => h.hash_key(k),
                    _ => k.clone(),
                })
                .collect()
        })
        .collect();
    KeyMessage {
        owner: part.owner,
        table: part.schema.table_name.clone(),
        hashed: hasher.is_some(),
        keys,
        row_ids: (0..part.num_rows()).collect(),
        labels: part.labels.clone(),
    }
}
