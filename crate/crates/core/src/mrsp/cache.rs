//! Exactly-once cache of gathered video embeddings.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::Result;
use crate::mmseq::{Embeddings, Video};

use super::encode::encode_and_gather;
use super::shard::ShardPlan;
use super::workers::WorkerGroup;

type Slot = Arc<Mutex<Option<Embeddings>>>;

/// Unbounded per-run cache keyed by video id.
///
/// The outer map lock is held only to find or create a key's slot; the slot's
/// own lock is held while encoding, so concurrent callers for the same video
/// wait for the first one while other videos proceed in parallel.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    slots: Mutex<HashMap<String, Slot>>,
    hits: AtomicU64,
    misses: AtomicU64,
    encoder_invocations: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    /// Frames encoded on behalf of misses.
    pub encoder_invocations: u64,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits + self.misses
    }
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the cached embeddings for `video`, encoding them on the first call.
    /// The flag is `true` on a hit.
    pub fn get_or_encode(&self, group: &WorkerGroup, video: &Video, plan: &ShardPlan) -> Result<(Embeddings, bool)> {
        let slot = {
            let mut slots = self.slots.lock().unwrap();
            Arc::clone(slots.entry(video.id.clone()).or_default())
        };
        let mut cell = slot.lock().unwrap();
        if let Some(embeddings) = cell.as_ref() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((Arc::clone(embeddings), true));
        }
        let embeddings: Embeddings = Arc::new(encode_and_gather(group, video, plan)?);
        self.misses.fetch_add(1, Ordering::Relaxed);
        self.encoder_invocations
            .fetch_add(video.frames.len() as u64, Ordering::Relaxed);
        *cell = Some(Arc::clone(&embeddings));
        Ok((embeddings, false))
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            encoder_invocations: self.encoder_invocations.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.slots
            .lock()
            .unwrap()
            .values()
            .filter(|s| s.lock().unwrap().is_some())
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
