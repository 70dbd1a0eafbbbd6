//! Content-addressed key/value store for large binaries (CAD models, images).

use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_BLOB_LIMIT: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlobRef {
    /// Lowercase hex SHA-256 of the content.
    pub hash: String,
    pub size: u64,
    pub media_type: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BlobError {
    #[error("blob of {size} bytes exceeds limit of {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("blob {0} not found")]
    NotFound(String),
    #[error("stored content for {0} does not match its digest")]
    CorruptContent(String),
}

pub fn sha256_hex(content: &[u8]) -> String {
    hex::encode(Sha256::digest(content))
}

#[derive(Debug)]
struct StoredBlob {
    blob_ref: BlobRef,
    content: Arc<Vec<u8>>,
}

#[derive(Debug, Default)]
struct BlobInner {
    blobs: BTreeMap<String, StoredBlob>,
    /// Insertion order, consumed by mirroring.
    journal: Vec<String>,
}

#[derive(Debug)]
pub struct BlobStore {
    inner: RwLock<BlobInner>,
    limit: usize,
}

impl Default for BlobStore {
    fn default() -> Self {
        Self::new(DEFAULT_BLOB_LIMIT)
    }
}

impl BlobStore {
    pub fn new(limit: usize) -> Self {
        Self { inner: RwLock::new(BlobInner::default()), limit }
    }

    /// Stores `content`. Identical content yields the identical reference
    /// (the first media type recorded wins).
    pub fn put_blob(&self, content: &[u8], media_type: &str) -> Result<BlobRef, BlobError> {
        if content.len() > self.limit {
            return Err(BlobError::TooLarge { size: content.len(), limit: self.limit });
        }
        let hash = sha256_hex(content);
        let mut inner = self.inner.write();
        if let Some(existing) = inner.blobs.get(&hash) {
            return Ok(existing.blob_ref.clone());
        }
        let blob_ref = BlobRef {
            hash: hash.clone(),
            size: content.len() as u64,
            media_type: media_type.to_owned(),
        };
        inner.blobs.insert(
            hash.clone(),
            StoredBlob { blob_ref: blob_ref.clone(), content: Arc::new(content.to_vec()) },
        );
        inner.journal.push(hash);
        Ok(blob_ref)
    }

    pub fn get_blob(&self, hash: &str) -> Result<Arc<Vec<u8>>, BlobError> {
        let inner = self.inner.read();
        let stored = inner.blobs.get(hash).ok_or_else(|| BlobError::NotFound(hash.to_owned()))?;
        if stored.content.len() as u64 != stored.blob_ref.size || sha256_hex(&stored.content) != hash {
            return Err(BlobError::CorruptContent(hash.to_owned()));
        }
        Ok(stored.content.clone())
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.inner.read().blobs.contains_key(hash)
    }

    pub fn lookup(&self, hash: &str) -> Option<BlobRef> {
        self.inner.read().blobs.get(hash).map(|b| b.blob_ref.clone())
    }

    pub fn refs(&self) -> Vec<BlobRef> {
        self.inner.read().blobs.values().map(|b| b.blob_ref.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.read().blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Blobs stored after the first `offset` insertions, in insertion order.
    pub fn journal_since(&self, offset: usize) -> Vec<(BlobRef, Arc<Vec<u8>>)> {
        let inner = self.inner.read();
        inner.journal[offset.min(inner.journal.len())..]
            .iter()
            .map(|h| {
                let b = &inner.blobs[h];
                (b.blob_ref.clone(), b.content.clone())
            })
            .collect()
    }

    pub fn journal_len(&self) -> usize {
        self.inner.read().journal.len()
    }

    /// Overwrites stored bytes without updating the digest. Simulates a
    /// storage fault.
    #[doc(hidden)]
    pub fn corrupt_for_testing(&self, hash: &str, content: Vec<u8>) {
        if let Some(b) = self.inner.write().blobs.get_mut(hash) {
            b.content = Arc::new(content);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_blob_hash_is_the_published_constant() {
        let s = BlobStore::default();
        let r = s.put_blob(b"", "application/octet-stream").unwrap();
        assert_eq!(r.hash, "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        assert_eq!(r.size, 0);
        assert_eq!(s.get_blob(&r.hash).unwrap().len(), 0);
    }

    #[test]
    fn identical_content_is_stored_once() {
        let s = BlobStore::default();
        let data = vec![7u8; 1 << 20];
        let a = s.put_blob(&data, "model/step").unwrap();
        let b = s.put_blob(&data, "model/step").unwrap();
        assert_eq!(a, b);
        assert_eq!(s.len(), 1);
        assert_eq!(s.journal_len(), 1);
    }

    #[test]
    fn too_large_and_not_found() {
        let s = BlobStore::new(4);
        assert_eq!(
            s.put_blob(b"12345", "x"),
            Err(BlobError::TooLarge { size: 5, limit: 4 })
        );
        assert!(matches!(s.get_blob("00"), Err(BlobError::NotFound(_))));
    }

    #[test]
    fn corruption_is_detected_on_read() {
        let s = BlobStore::default();
        let r = s.put_blob(b"cad", "model/step").unwrap();
        s.corrupt_for_testing(&r.hash, b"cat".to_vec());
        assert_eq!(s.get_blob(&r.hash), Err(BlobError::CorruptContent(r.hash.clone())));
    }
}
