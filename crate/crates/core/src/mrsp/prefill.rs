//! Padded, position-sharded teacher-forced prefill.
//!
//! The toy policy conditions each position on the pooled prompt context and
//! the previous token only, so position ranges can be computed independently
//! without any halo exchange between ranks.

use std::ops::Range;
use std::sync::atomic::Ordering;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::mmseq::{TokenId, EOS, PAD};
use crate::policy::{step_logits, PolicyParams};

use super::shard::ShardPlan;
use super::workers::{WorkerCtx, WorkerGroup};

/// Token sequences padded with PAD to a common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    tokens: Vec<Vec<TokenId>>,
    lengths: Vec<usize>,
    max_len: usize,
}

impl PaddedBatch {
    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn padded(&self) -> &[Vec<TokenId>] {
        &self.tokens
    }

    pub fn pad_counts(&self) -> Vec<usize> {
        self.lengths.iter().map(|l| self.max_len - l).collect()
    }

    pub fn unpad(&self) -> Vec<Vec<TokenId>> {
        self.tokens
            .iter()
            .zip(&self.lengths)
            .map(|(t, &l)| t[..l].to_vec())
            .collect()
    }

    /// Previous token feeding position `pos` of sequence `seq`.
    fn prev_token(&self, seq: usize, pos: usize, ctx: &WorkerCtx) -> TokenId {
        if pos == 0 {
            return EOS;
        }
        if pos - 1 >= self.lengths[seq] {
            ctx.stats.pad_reads.fetch_add(1, Ordering::Relaxed);
        }
        self.tokens[seq][pos - 1]
    }
}

pub fn pad_batch(sequences: &[Vec<TokenId>]) -> Result<PaddedBatch> {
    if sequences.is_empty() {
        return Err(invalid!("cannot pad an empty batch"));
    }
    let lengths: Vec<usize> = sequences.iter().map(Vec::len).collect();
    let max_len = *lengths.iter().max().unwrap();
    let tokens = sequences
        .iter()
        .map(|s| {
            let mut t = s.clone();
            t.resize(max_len, PAD);
            t
        })
        .collect();
    Ok(PaddedBatch {
        tokens,
        lengths,
        max_len,
    })
}

/// Logits for every real position, `[sequence][position][vocab]`.
pub type PrefillLogits = Vec<Vec<Vec<f64>>>;

/// Single-threaded reference prefill.
pub fn serial_prefill(params: &PolicyParams, contexts: &[Vec<f64>], sequences: &[Vec<TokenId>]) -> Result<PrefillLogits> {
    if contexts.len() != sequences.len() {
        return Err(invalid!("{} contexts for {} sequences", contexts.len(), sequences.len()));
    }
    sequences
        .iter()
        .zip(contexts)
        .map(|(tokens, ctx)| {
            let mut prev = EOS;
            tokens
                .iter()
                .map(|&t| {
                    let logits = step_logits(params, ctx, prev);
                    prev = t;
                    logits
                })
                .collect()
        })
        .collect()
}

/// Each rank computes the logits for its range of positions in every sequence;
/// the gathered result covers real positions only.
pub fn parallel_prefill(
    group: &WorkerGroup,
    params: Arc<PolicyParams>,
    contexts: Arc<Vec<Vec<f64>>>,
    batch: Arc<PaddedBatch>,
    plan: &ShardPlan,
    completion_order: Option<&[usize]>,
) -> Result<PrefillLogits> {
    plan.expect_items(batch.max_len(), "padded batch")?;
    if plan.sp_degree() != group.sp_degree() {
        return Err(invalid!("plan has {} ranges for {} ranks", plan.sp_degree(), group.sp_degree()));
    }
    if contexts.len() != batch.len() {
        return Err(invalid!("{} contexts for {} sequences", contexts.len(), batch.len()));
    }
    let n_seq = batch.len();
    let ranges: Arc<Vec<Range<usize>>> = Arc::new(plan.ranges().to_vec());
    let replies = group.run(
        move |ctx| -> Result<Vec<Vec<Vec<f64>>>> {
            let range = &ranges[ctx.rank];
            (0..batch.len())
                .map(|s| {
                    let real_end = range.end.min(batch.lengths[s]);
                    (range.start..real_end.max(range.start))
                        .map(|pos| step_logits(&params, &contexts[s], batch.prev_token(s, pos, ctx)))
                        .collect()
                })
                .collect()
        },
        completion_order,
    )?;

    let mut by_rank: Vec<Option<Vec<Vec<Vec<f64>>>>> = (0..group.sp_degree()).map(|_| None).collect();
    for reply in replies {
        by_rank[reply.rank] = Some(reply.value?);
    }
    let mut out: PrefillLogits = vec![Vec::new(); n_seq];
    for slice in by_rank {
        let slice = slice.ok_or_else(|| Error::State("prefill slice missing".into()))?;
        for (seq_out, part) in out.iter_mut().zip(slice) {
            seq_out.extend(part);
        }
    }
    Ok(out)
}
