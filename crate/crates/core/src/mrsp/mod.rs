//! Multi-modal reinforcement sequence parallelism.
//!
//! Stage 1 splits a video's frames into balanced contiguous shards, encodes each
//! shard on its own rank and all-gathers the embeddings; the gathered result is
//! cached per video and reused by every rollout. Stage 2 pads rollout token
//! sequences to a common length and shards positions across ranks for the
//! teacher-forced prefill of both the policy and the reference model.

mod bench;
mod cache;
mod encode;
mod prefill;
mod shard;
mod workers;

use std::sync::Arc;

pub use bench::{bench, render_table, BenchConfig, BenchRecord};
pub use cache::{CacheStats, EmbeddingCache};
pub use encode::{all_gather, parallel_encode, serial_encode, EmbeddingSlice, Gathered};
pub use prefill::{pad_batch, parallel_prefill, serial_prefill, PaddedBatch, PrefillLogits};
pub use shard::{plan_shards, ShardPlan};
pub use workers::{GroupStats, Reply, WorkerCtx, WorkerGroup};

use crate::error::Result;
use crate::mmseq::{Embeddings, TokenId, Video};
use crate::policy::{EncoderParams, PolicyParams};

/// Worker group plus optional embedding cache: what the training loop talks to.
#[derive(Debug)]
pub struct Engine {
    group: WorkerGroup,
    cache: Option<EmbeddingCache>,
}

impl Engine {
    pub fn new(sp_degree: usize, encoder: &EncoderParams, cache_enabled: bool) -> Result<Self> {
        Ok(Engine {
            group: WorkerGroup::new(sp_degree, encoder)?,
            cache: cache_enabled.then(EmbeddingCache::new),
        })
    }

    pub fn sp_degree(&self) -> usize {
        self.group.sp_degree()
    }

    pub fn group(&self) -> &WorkerGroup {
        &self.group
    }

    pub fn cache_stats(&self) -> Option<CacheStats> {
        self.cache.as_ref().map(EmbeddingCache::stats)
    }

    pub fn stats(&self) -> GroupStats {
        self.group.stats()
    }

    /// Gathered frame embeddings, from the cache when enabled.
    pub fn embeddings(&self, video: &Video) -> Result<Embeddings> {
        let plan = plan_shards(video.frames.len(), self.sp_degree())?;
        match &self.cache {
            Some(cache) => Ok(cache.get_or_encode(&self.group, video, &plan)?.0),
            None => Ok(Arc::new(encode::encode_and_gather(&self.group, video, &plan)?)),
        }
    }

    /// Pads `sequences`, shards positions over the ranks and returns per-position logits.
    pub fn prefill(
        &self,
        params: &Arc<PolicyParams>,
        contexts: Vec<Vec<f64>>,
        sequences: &[Vec<TokenId>],
    ) -> Result<PrefillLogits> {
        let batch = Arc::new(pad_batch(sequences)?);
        let plan = plan_shards(batch.max_len(), self.sp_degree())?;
        parallel_prefill(&self.group, Arc::clone(params), Arc::new(contexts), batch, &plan, None)
    }
}
