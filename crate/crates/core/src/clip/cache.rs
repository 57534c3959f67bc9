//! On-disk target cache: `index.json` plus fixed-width little-endian f32 shards.
//!
//! Record layout: text projection (768), image projection (768), raw text
//! states (77 x 768). Record `r` lives in shard `r / records_per_shard` at
//! byte offset `(r % records_per_shard) * record_bytes`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ClipError, ClipTargets};
use crate::dataset::{load_image, DatasetManifest};
use crate::types::{EmbeddingMatrix, EMBED_DIM, SEQ_LEN};

pub const CACHE_SCHEMA_VERSION: u32 = 1;
const RECORD_FLOATS: usize = 2 * EMBED_DIM + SEQ_LEN * EMBED_DIM;
const RECORD_BYTES: usize = RECORD_FLOATS * 4;
const DEFAULT_RECORDS_PER_SHARD: u64 = 1024;
const FLUSH_EVERY: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetCacheEntry {
    pub trio_id: String,
    pub text_projection: Vec<f32>,
    pub image_projection: Vec<f32>,
    pub text_raw: EmbeddingMatrix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheIndex {
    schema_version: u32,
    checkpoint_id: String,
    record_floats: usize,
    records_per_shard: u64,
    /// trio_id → record number.
    entries: BTreeMap<String, u64>,
}

pub struct TargetCache {
    dir: PathBuf,
    index: CacheIndex,
}

fn shard_name(shard: u64) -> String {
    format!("shard-{shard:05}.bin")
}

impl TargetCache {
    /// Opens or creates the cache at `dir` for the given checkpoint.
    pub fn open(dir: &Path, checkpoint_id: &str) -> Result<Self, ClipError> {
        let index_path = dir.join("index.json");
        if index_path.exists() {
            let cache = Self::open_existing(dir)?;
            if cache.index.checkpoint_id != checkpoint_id {
                return Err(ClipError::CheckpointMismatch {
                    expected: checkpoint_id.to_string(),
                    found: cache.index.checkpoint_id,
                });
            }
            return Ok(cache);
        }
        fs::create_dir_all(dir)?;
        let cache = Self {
            dir: dir.to_path_buf(),
            index: CacheIndex {
                schema_version: CACHE_SCHEMA_VERSION,
                checkpoint_id: checkpoint_id.to_string(),
                record_floats: RECORD_FLOATS,
                records_per_shard: DEFAULT_RECORDS_PER_SHARD,
                entries: BTreeMap::new(),
            },
        };
        cache.flush()?;
        Ok(cache)
    }

    /// Opens an existing cache whatever checkpoint built it.
    pub fn open_existing(dir: &Path) -> Result<Self, ClipError> {
        let text = fs::read_to_string(dir.join("index.json"))?;
        let index: CacheIndex =
            serde_json::from_str(&text).map_err(|e| ClipError::StorageFailure(e.to_string()))?;
        if index.schema_version != CACHE_SCHEMA_VERSION || index.record_floats != RECORD_FLOATS {
            return Err(ClipError::StorageFailure(format!(
                "unsupported cache layout (schema {}, {} floats per record)",
                index.schema_version, index.record_floats
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.index.checkpoint_id
    }

    pub fn len(&self) -> usize {
        self.index.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.entries.is_empty()
    }

    pub fn contains(&self, trio_id: &str) -> bool {
        self.index.entries.contains_key(trio_id)
    }

    fn locate(&self, record: u64) -> (PathBuf, u64) {
        let shard = record / self.index.records_per_shard;
        let offset = (record % self.index.records_per_shard) * RECORD_BYTES as u64;
        (self.dir.join(shard_name(shard)), offset)
    }

    /// The first `floats` values of the record for `trio_id`.
    fn read_prefix(&self, trio_id: &str, floats: usize) -> Result<Vec<f32>, ClipError> {
        let record = *self
            .index
            .entries
            .get(trio_id)
            .ok_or_else(|| ClipError::CacheMiss(trio_id.to_string()))?;
        let (path, offset) = self.locate(record);
        let mut file = File::open(&path)?;
        file.seek(SeekFrom::Start(offset))?;
        let mut bytes = vec![0u8; floats * 4];
        file.read_exact(&mut bytes)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Text and image projections only, without reading the raw states.
    pub fn get_projections(&self, trio_id: &str) -> Result<(Vec<f32>, Vec<f32>), ClipError> {
        let mut floats = self.read_prefix(trio_id, 2 * EMBED_DIM)?;
        let image = floats.split_off(EMBED_DIM);
        Ok((floats, image))
    }

    pub fn get(&self, trio_id: &str) -> Result<TargetCacheEntry, ClipError> {
        let floats = self.read_prefix(trio_id, RECORD_FLOATS)?;
        let text_raw = EmbeddingMatrix::from_vec(floats[2 * EMBED_DIM..].to_vec())
            .map_err(|e| ClipError::StorageFailure(format!("record for {trio_id}: {e}")))?;
        Ok(TargetCacheEntry {
            trio_id: trio_id.to_string(),
            text_projection: floats[..EMBED_DIM].to_vec(),
            image_projection: floats[EMBED_DIM..2 * EMBED_DIM].to_vec(),
            text_raw,
        })
    }

    /// Appends a record. The index is persisted by [`TargetCache::flush`].
    pub fn insert(&mut self, entry: &TargetCacheEntry) -> Result<(), ClipError> {
        if entry.text_projection.len() != EMBED_DIM || entry.image_projection.len() != EMBED_DIM {
            return Err(ClipError::StorageFailure(format!(
                "projections for {} must have {EMBED_DIM} entries",
                entry.trio_id
            )));
        }
        let record = match self.index.entries.get(&entry.trio_id) {
            Some(&r) => r,
            // records are dense: never removed
            None => self.index.entries.len() as u64,
        };
        let (path, offset) = self.locate(record);
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(false)
            .open(&path)?;
        file.seek(SeekFrom::Start(offset))?;
        let mut bytes = Vec::with_capacity(RECORD_BYTES);
        for v in entry
            .text_projection
            .iter()
            .chain(&entry.image_projection)
            .chain(entry.text_raw.values())
        {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes)?;
        self.index.entries.insert(entry.trio_id.clone(), record);
        Ok(())
    }

    /// Atomically rewrites `index.json`.
    pub fn flush(&self) -> Result<(), ClipError> {
        let json = serde_json::to_string_pretty(&self.index)
            .map_err(|e| ClipError::StorageFailure(e.to_string()))?;
        let tmp = self.dir.join("index.json.tmp");
        fs::write(&tmp, json)?;
        fs::rename(&tmp, self.dir.join("index.json"))?;
        Ok(())
    }
}

/// Encodes targets for every manifest entry missing from the cache.
///
/// Returns the number of newly written entries.
pub fn precompute_targets(
    manifest: &DatasetManifest,
    clip: &dyn ClipTargets,
    cache: &mut TargetCache,
) -> Result<usize, ClipError> {
    if cache.checkpoint_id() != clip.checkpoint_id() {
        return Err(ClipError::CheckpointMismatch {
            expected: clip.checkpoint_id().to_string(),
            found: cache.checkpoint_id().to_string(),
        });
    }
    let mut written = 0;
    for entry in &manifest.entries {
        if cache.contains(&entry.trio_id) {
            continue;
        }
        for rel in [&entry.audio_path, &entry.image_path] {
            let path = manifest.resolve(rel);
            if !path.is_file() {
                return Err(ClipError::MissingAsset {
                    trio_id: entry.trio_id.clone(),
                    path: path.display().to_string(),
                });
            }
        }
        let image = load_image(&manifest.resolve(&entry.image_path))?;
        let (text_raw, text_projection) = clip.encode_text(&entry.text)?;
        let image_projection = clip.encode_image_projection(&image)?;
        cache.insert(&TargetCacheEntry {
            trio_id: entry.trio_id.clone(),
            text_projection,
            image_projection,
            text_raw,
        })?;
        written += 1;
        if written % FLUSH_EVERY == 0 {
            cache.flush()?;
        }
    }
    cache.flush()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, seed: f32) -> TargetCacheEntry {
        TargetCacheEntry {
            trio_id: id.into(),
            text_projection: (0..EMBED_DIM).map(|i| seed + i as f32).collect(),
            image_projection: (0..EMBED_DIM).map(|i| seed - i as f32).collect(),
            text_raw: EmbeddingMatrix::from_vec(
                (0..SEQ_LEN * EMBED_DIM)
                    .map(|i| seed * 0.5 + i as f32 * 1e-3)
                    .collect(),
            )
            .unwrap(),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut cache = TargetCache::open(dir.path(), "ck").unwrap();
        let (a, b) = (entry("a", 0.25), entry("b", -3.0));
        cache.insert(&a).unwrap();
        cache.insert(&b).unwrap();
        cache.flush().unwrap();
        let reopened = TargetCache::open(dir.path(), "ck").unwrap();
        assert_eq!(reopened.len(), 2);
        assert_eq!(reopened.get("a").unwrap(), a);
        assert_eq!(reopened.get("b").unwrap(), b);
        assert_eq!(
            reopened.get_projections("a").unwrap(),
            (a.text_projection.clone(), a.image_projection.clone())
        );
        assert!(matches!(reopened.get("zzz"), Err(ClipError::CacheMiss(_))));
    }

    #[test]
    fn checkpoint_id_is_verified() {
        let dir = tempfile::tempdir().unwrap();
        TargetCache::open(dir.path(), "first").unwrap();
        assert!(matches!(
            TargetCache::open(dir.path(), "second"),
            Err(ClipError::CheckpointMismatch { .. })
        ));
    }
}
