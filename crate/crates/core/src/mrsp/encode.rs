use std::ops::Range;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::mmseq::{Frame, Video};
use crate::policy::{encode_frame, EncoderParams};

use super::shard::ShardPlan;
use super::workers::WorkerGroup;

/// One rank's encoded frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSlice {
    pub rank: usize,
    pub range: Range<usize>,
    pub embeddings: Vec<Vec<f64>>,
    pub busy: Duration,
}

/// Encodes every frame on the calling thread.
pub fn serial_encode(enc: &EncoderParams, video: &Video) -> Result<Vec<Vec<f64>>> {
    video.frames.iter().map(|f| encode_frame(enc, f)).collect()
}

/// Each rank encodes exactly its planned range of frames.
///
/// Slices come back in arrival order, or in `completion_order` when forced.
pub fn parallel_encode(
    group: &WorkerGroup,
    video: &Video,
    plan: &ShardPlan,
    completion_order: Option<&[usize]>,
) -> Result<Vec<EmbeddingSlice>> {
    plan.expect_items(video.frames.len(), "video")?;
    if plan.sp_degree() != group.sp_degree() {
        return Err(Error::InvalidArgument(format!(
            "plan has {} ranges for {} ranks",
            plan.sp_degree(),
            group.sp_degree()
        )));
    }
    // Each rank receives a copy of its own frames only.
    let shards: Arc<Vec<(Range<usize>, Vec<Frame>)>> = Arc::new(
        plan.ranges()
            .iter()
            .map(|r| (r.clone(), video.frames[r.clone()].to_vec()))
            .collect(),
    );
    let replies = group.run(
        move |ctx| {
            let (range, frames) = &shards[ctx.rank];
            let encoded: Result<Vec<Vec<f64>>> = frames.iter().map(|f| encode_frame(&ctx.encoder, f)).collect();
            ctx.count_encoded(frames.len());
            (range.clone(), encoded)
        },
        completion_order,
    )?;
    replies
        .into_iter()
        .map(|reply| {
            let (range, encoded) = reply.value;
            Ok(EmbeddingSlice {
                rank: reply.rank,
                range,
                embeddings: encoded?,
                busy: reply.busy,
            })
        })
        .collect()
}

/// Reassembled embeddings plus simulated communication volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Gathered {
    pub embeddings: Vec<Vec<f64>>,
    pub bytes_moved: u64,
}

/// Concatenates slices in range order, whatever order they arrived in.
///
/// Every rank broadcasts its slice to the other `k − 1` ranks, so the simulated
/// traffic is `values × (k − 1) × 8` bytes.
pub fn all_gather(mut slices: Vec<EmbeddingSlice>, plan: &ShardPlan) -> Result<Gathered> {
    slices.sort_by_key(|s| s.rank);
    let k = plan.sp_degree();
    if slices.len() != k {
        return Err(Error::State(format!("all-gather received {} of {k} slices", slices.len())));
    }
    let mut embeddings = Vec::with_capacity(plan.num_items());
    let mut values = 0u64;
    for (rank, (slice, expected)) in slices.into_iter().zip(plan.ranges()).enumerate() {
        if slice.rank != rank || slice.range != *expected || slice.embeddings.len() != expected.len() {
            return Err(Error::State(format!(
                "all-gather slice for rank {rank} is missing or covers {:?} instead of {expected:?}",
                slice.range
            )));
        }
        values += slice.embeddings.iter().map(|e| e.len() as u64).sum::<u64>();
        embeddings.extend(slice.embeddings);
    }
    Ok(Gathered {
        embeddings,
        bytes_moved: values * (k as u64 - 1) * 8,
    })
}

/// Parallel encode followed by all-gather, with traffic recorded on the group.
pub(crate) fn encode_and_gather(group: &WorkerGroup, video: &Video, plan: &ShardPlan) -> Result<Vec<Vec<f64>>> {
    let gathered = all_gather(parallel_encode(group, video, plan, None)?, plan)?;
    group
        .counters()
        .gather_bytes
        .fetch_add(gathered.bytes_moved, Ordering::Relaxed);
    Ok(gathered.embeddings)
}
