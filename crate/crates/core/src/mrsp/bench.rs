//! Step-time benchmark over frames × sp_degree × cache.
//!
//! One simulated step takes a fresh video, fetches its embeddings once per
//! rollout (through the cache when enabled), builds each rollout's context and
//! prefills a batch of `G` fixed-length token sequences. Every repetition uses a
//! new video so the cached configuration encodes exactly once per step.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mmseq::{gen_video, MultimodalSequence, TokenId, FIRST_CONTENT};
use crate::policy::{context_vector, EncoderParams, PolicyDims, PolicyParams};
use crate::rng;

use super::{plan_shards, Engine};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub frames_grid: Vec<usize>,
    pub sp_grid: Vec<usize>,
    pub cache_grid: Vec<bool>,
    pub group_size: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub response_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            frames_grid: vec![64, 256, 512],
            sp_grid: vec![1, 2, 4],
            cache_grid: vec![false, true],
            group_size: 8,
            repetitions: 3,
            warmup: 1,
            feature_dim: 512,
            embed_dim: 128,
            response_len: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub frames: usize,
    pub sp_degree: usize,
    pub cache: bool,
    #[serde(rename = "G")]
    pub group_size: usize,
    pub median_ms: f64,
    /// Frames encoded per step.
    pub encoder_invocations: u64,
    /// Simulated all-gather bytes per step.
    pub gather_bytes: u64,
    /// Largest fraction of the step any rank spent without work.
    pub idle_frac: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    if cfg.repetitions == 0 || cfg.group_size == 0 || cfg.response_len == 0 {
        return Err(invalid!("bench needs positive repetitions, group size and response length"));
    }
    if cfg.frames_grid.iter().any(|&f| f == 0) || cfg.sp_grid.iter().any(|&k| k == 0) {
        return Err(invalid!("bench grid entries must be positive"));
    }
    let encoder = EncoderParams::from_seed(cfg.seed, cfg.embed_dim, cfg.feature_dim);
    let dims = PolicyDims {
        vocab: crate::mmseq::DEFAULT_VOCAB,
        embed: cfg.embed_dim,
        hidden: crate::policy::DEFAULT_HIDDEN,
    };
    let params = Arc::new(PolicyParams::random(dims, 0.1, &mut rng::stream(cfg.seed, &[1])));
    let response: Vec<TokenId> = (0..cfg.response_len)
        .map(|i| FIRST_CONTENT + (i % 8) as TokenId)
        .collect();

    let mut records = Vec::new();
    for &frames in &cfg.frames_grid {
        for &sp in &cfg.sp_grid {
            for &cache in &cfg.cache_grid {
                let engine = Engine::new(sp, &encoder, cache)?;
                let mut times = Vec::with_capacity(cfg.repetitions);
                let mut last = (0u64, 0u64);
                let mut idle = 0.0f64;
                for rep in 0..cfg.warmup + cfg.repetitions {
                    let video = gen_video(rng::derive_seed(cfg.seed, &[frames as u64, rep as u64]), frames, cfg.feature_dim)?;
                    let before = engine.stats();
                    let start = Instant::now();
                    let mut contexts = Vec::with_capacity(cfg.group_size);
                    for _ in 0..cfg.group_size {
                        let seq = MultimodalSequence {
                            frame_embeddings: engine.embeddings(&video)?,
                            text_tokens: vec![FIRST_CONTENT],
                        };
                        contexts.push(context_vector(&seq, &params)?);
                    }
                    let responses = vec![response.clone(); cfg.group_size];
                    engine.prefill(&params, contexts, &responses)?;
                    let elapsed = start.elapsed();
                    let after = engine.stats();
                    if rep >= cfg.warmup {
                        times.push(elapsed.as_secs_f64() * 1e3);
                        last = (
                            after.encoder_invocations - before.encoder_invocations,
                            after.gather_bytes - before.gather_bytes,
                        );
                        // Idle = step time not spent encoding this rank's share.
                        let plan = plan_shards(frames, sp)?;
                        let encodes_per_step = if cache { 1.0 } else { cfg.group_size as f64 };
                        let per_frame = elapsed.as_secs_f64() / (frames as f64 * encodes_per_step / sp as f64).max(1.0);
                        let busiest = *plan.lengths().iter().max().unwrap() as f64;
                        let least = *plan.lengths().iter().min().unwrap() as f64;
                        let busy_min = least * per_frame * encodes_per_step;
                        let busy_max = busiest * per_frame * encodes_per_step;
                        let step = elapsed.as_secs_f64().max(busy_max);
                        idle = idle.max(1.0 - busy_min / step);
                    }
                }
                records.push(BenchRecord {
                    frames,
                    sp_degree: sp,
                    cache,
                    group_size: cfg.group_size,
                    median_ms: median(times),
                    encoder_invocations: last.0,
                    gather_bytes: last.1,
                    idle_frac: idle.clamp(0.0, 1.0),
                });
            }
        }
    }
    Ok(records)
}

/// Aligned text table with speedup relative to the `sp = 1`, cache-off cell of
/// the same frame count, plus a flag where time grows with `sp` at fixed cache.
pub fn render_table(records: &[BenchRecord]) -> String {
    let baseline = |frames: usize| {
        records
            .iter()
            .find(|r| r.frames == frames && r.sp_degree == 1 && !r.cache)
            .map(|r| r.median_ms)
    };
    let mut out = format!(
        "{:>7} {:>3} {:>5} {:>3} {:>10} {:>8} {:>10} {:>12} {:>6}  {}\n",
        "frames", "sp", "cache", "G", "median_ms", "speedup", "encodes", "gather_B", "idle", "note"
    );
    for r in records {
        let speedup = baseline(r.frames).map_or(f64::NAN, |b| b / r.median_ms);
        let slower_than_fewer_ranks = records.iter().any(|o| {
            o.frames == r.frames && o.cache == r.cache && o.sp_degree < r.sp_degree && o.median_ms < r.median_ms
        });
        out.push_str(&format!(
            "{:>7} {:>3} {:>5} {:>3} {:>10.3} {:>7.2}x {:>10} {:>12} {:>6.2}  {}\n",
            r.frames,
            r.sp_degree,
            if r.cache { "on" } else { "off" },
            r.group_size,
            r.median_ms,
            speedup,
            r.encoder_invocations,
            r.gather_bytes,
            r.idle_frac,
            if slower_than_fewer_ranks { "non-monotone in sp" } else { "" }
        ));
    }
    out
}
