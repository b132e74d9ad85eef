use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{io_err, StoreError};
use crate::featurize::{AttentionMap, BackendDescriptor, FeatureMap};
use crate::fmap::{write_atomic, Dtype};
use crate::geometry::TransformSet;

/// SHA-256 over the image bytes, backend descriptor JSON and transform set
/// JSON, each prefixed by its length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn new(image_bytes: &[u8], backend: &BackendDescriptor, set: &TransformSet) -> Self {
        let mut h = Sha256::new();
        for part in [image_bytes, backend.to_json().as_bytes(), set.to_json().as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        Self(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Content-addressed store of feature and attention maps.
///
/// Each entry is `<key>.fmap` and `<key>.attn.fmap`, each followed by a
/// `.sum` file holding the SHA-256 of its bytes. Files are published by
/// rename and the checksum is written last, so an entry without checksums
/// is still being written and reads as a miss. An entry whose bytes do not
/// match its checksum also reads as a miss and is left for the next `put` to
/// replace, since a concurrent writer may be halfway through publishing it.
#[derive(Debug)]
pub struct FeatureCache {
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn feature_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.fmap"))
    }

    pub fn attention_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.attn.fmap"))
    }

    fn sum_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".sum");
        PathBuf::from(s)
    }

    /// `(hits, misses)` since construction.
    pub fn stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    fn publish(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
        write_atomic(path, bytes).map_err(io_err(path))?;
        let sum = Self::sum_path(path);
        write_atomic(&sum, hex::encode(Sha256::digest(bytes)).as_bytes()).map_err(io_err(&sum))
    }

    pub fn put(&self, key: &CacheKey, features: &FeatureMap, attention: &AttentionMap) -> Result<(), StoreError> {
        Self::publish(&self.feature_path(key), &features.to_fmap_bytes(Dtype::F32))?;
        Self::publish(&self.attention_path(key), &attention.to_fmap_bytes(Dtype::F32))?;
        log::debug!("feature cache stored {key}");
        Ok(())
    }

    fn read_verified(path: &Path) -> Result<Option<Vec<u8>>, StoreError> {
        let sum_path = Self::sum_path(path);
        let expected = match fs::read_to_string(&sum_path) {
            Ok(s) => s,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&sum_path)(e)),
        };
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(path)(e)),
        };
        if hex::encode(Sha256::digest(&bytes)) != expected.trim() {
            log::warn!("feature cache checksum mismatch for {}, treating as a miss", path.display());
            return Ok(None);
        }
        Ok(Some(bytes))
    }

    /// Whether both files and their checksums are present. Does not verify
    /// the bytes.
    pub fn contains(&self, key: &CacheKey) -> bool {
        [self.feature_path(key), self.attention_path(key)]
            .iter()
            .all(|p| p.is_file() && Self::sum_path(p).is_file())
    }

    /// Verified raw bytes of both files, or `None` on a miss.
    pub fn lookup_bytes(&self, key: &CacheKey) -> Result<Option<(Vec<u8>, Vec<u8>)>, StoreError> {
        let Some(f) = Self::read_verified(&self.feature_path(key))? else { return Ok(None) };
        let Some(a) = Self::read_verified(&self.attention_path(key))? else { return Ok(None) };
        Ok(Some((f, a)))
    }

    pub fn lookup(&self, key: &CacheKey) -> Result<Option<(FeatureMap, AttentionMap)>, StoreError> {
        let found = match self.lookup_bytes(key)? {
            Some((f, a)) => match (FeatureMap::from_fmap_bytes(&f), AttentionMap::from_fmap_bytes(&a)) {
                (Ok(f), Ok(a)) => Some((f, a)),
                _ => {
                    log::warn!("feature cache entry {key} does not decode, treating as a miss");
                    None
                }
            },
            None => None,
        };
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            log::info!("feature cache hit {key}");
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            log::info!("feature cache miss {key}");
        }
        Ok(found)
    }

    /// Returns the cached maps, or computes, stores and returns them. The flag
    /// is true on a hit.
    pub fn get_or_compute<E>(
        &self,
        key: &CacheKey,
        compute: impl FnOnce() -> Result<(FeatureMap, AttentionMap), E>,
    ) -> Result<((FeatureMap, AttentionMap), bool), E>
    where
        E: From<StoreError>,
    {
        if let Some(v) = self.lookup(key)? {
            return Ok((v, true));
        }
        let v = compute()?;
        self.put(key, &v.0, &v.1)?;
        Ok((v, false))
    }

    /// Removes an entry. Returns whether anything was deleted.
    pub fn evict(&self, key: &CacheKey) -> Result<bool, StoreError> {
        let mut removed = false;
        for p in [self.feature_path(key), self.attention_path(key)] {
            for q in [Self::sum_path(&p), p] {
                match fs::remove_file(&q) {
                    Ok(()) => removed = true,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                    Err(e) => return Err(io_err(&q)(e)),
                }
            }
        }
        Ok(removed)
    }
}
