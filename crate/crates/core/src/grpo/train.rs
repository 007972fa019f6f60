//! SFT warm-up followed by GRPO, driven through the MR-SP engine.
//!
//! Per-sample work (rollouts, scoring, objective and gradient) runs on rayon;
//! results are collected in sample order and reduced sequentially, so a run is
//! bit-identical whatever the thread count.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_group, reference_log_probs, sft_loss_and_grad, sft_target, GrpoConfig, RefLogProbs, RolloutGroup};
use crate::error::{invalid, Error, Result};
use crate::mmseq::{build_sequence, MultimodalSequence, Sample, Video, Vocab};
use crate::mrsp::Engine;
use crate::policy::{context_vector, log_softmax, sample_rollout, PolicyParams, Rollout};
use crate::rewards::{score, RewardConfig};
use crate::rng;

const SFT_STREAM: u64 = 0x5f7;
const RL_STREAM: u64 = 0x41_4c;

/// Scored, advantaged groups for one RL step with their prompt sequences.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub groups: Vec<RolloutGroup>,
    pub sequences: Vec<MultimodalSequence>,
    /// Reference tables per group; computed from the reference policy when absent.
    pub ref_log_probs: Option<Vec<RefLogProbs>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StageSteps {
    pub sft_steps: usize,
    pub rl_steps: usize,
}

impl StageSteps {
    pub fn total(&self) -> usize {
        self.sft_steps + self.rl_steps
    }
}

/// One metrics record. SFT steps carry zero reward fields and the cross-entropy
/// as `loss`; RL steps carry `−J` averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: String,
    pub mean_reward: f64,
    pub mean_format: f64,
    pub mean_accuracy: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub wall_ms: f64,
    pub loss: f64,
}

impl StepMetrics {
    fn empty(stage: &str) -> Self {
        StepMetrics {
            step: 0,
            stage: stage.into(),
            mean_reward: 0.0,
            mean_format: 0.0,
            mean_accuracy: 0.0,
            mean_kl: 0.0,
            clip_fraction: 0.0,
            wall_ms: 0.0,
            loss: 0.0,
        }
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} component {i} is {}", values[i]))),
        None => Ok(()),
    }
}

/// One plain gradient-ascent update `θ ← θ + lr · mean_groups ∇J`.
///
/// Degenerate groups contribute no policy term (their advantages are zero) but
/// still contribute the KL penalty.
pub fn train_step(
    theta: &mut PolicyParams,
    reference: &PolicyParams,
    batch: &GroupBatch,
    cfg: &GrpoConfig,
) -> Result<StepMetrics> {
    if batch.groups.is_empty() || batch.groups.len() != batch.sequences.len() {
        return Err(invalid!(
            "batch has {} groups and {} sequences",
            batch.groups.len(),
            batch.sequences.len()
        ));
    }
    let ref_tables: Vec<RefLogProbs> = match &batch.ref_log_probs {
        Some(t) if t.len() == batch.groups.len() => t.clone(),
        Some(t) => return Err(Error::State(format!("{} reference tables for {} groups", t.len(), batch.groups.len()))),
        None => batch
            .groups
            .iter()
            .zip(&batch.sequences)
            .map(|(g, s)| reference_log_probs(reference, s, g))
            .collect::<Result<_>>()?,
    };
    let current: &PolicyParams = theta;
    let evals = batch
        .groups
        .par_iter()
        .zip(&batch.sequences)
        .zip(&ref_tables)
        .map(|((g, s), r)| evaluate_group(g, current, r, s, cfg, true))
        .collect::<Result<Vec<_>>>()?;

    let mut grad = vec![0.0; theta.len()];
    let (mut objective, mut kl_weighted, mut clipped, mut tokens) = (0.0, 0.0, 0usize, 0usize);
    for e in &evals {
        for (acc, g) in grad.iter_mut().zip(e.gradient.as_ref().expect("gradient requested")) {
            *acc += g;
        }
        objective += e.objective;
        kl_weighted += e.exact_kl * e.total_tokens as f64;
        clipped += e.clipped_tokens;
        tokens += e.total_tokens;
    }
    let n_groups = evals.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n_groups);
    check_finite(&grad, "gradient")?;
    for (p, g) in theta.as_mut_slice().iter_mut().zip(&grad) {
        *p += cfg.learning_rate * g;
    }

    let rewards: Vec<_> = batch
        .groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .map(|r| r.reward.ok_or_else(|| Error::State("rollout has not been scored".into())))
        .collect::<Result<_>>()?;
    let n = rewards.len() as f64;
    Ok(StepMetrics {
        mean_reward: rewards.iter().map(|r| r.total).sum::<f64>() / n,
        mean_format: rewards.iter().map(|r| r.format).sum::<f64>() / n,
        mean_accuracy: rewards.iter().map(|r| r.accuracy).sum::<f64>() / n,
        mean_kl: kl_weighted / tokens as f64,
        clip_fraction: clipped as f64 / tokens as f64,
        loss: -objective / n_groups,
        ..StepMetrics::empty("rl")
    })
}

/// Knobs of the training loop beyond the GRPO objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub grpo: GrpoConfig,
    pub rewards: RewardConfig,
    /// Samples per step; each RL sample contributes a group of `G` rollouts.
    pub batch_size: usize,
    pub sft_learning_rate: f64,
    pub seed: u64,
    /// When false, `wall_ms` is written as 0 so metrics files are reproducible.
    pub record_timing: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            grpo: GrpoConfig::default(),
            rewards: RewardConfig::default(),
            batch_size: 8,
            sft_learning_rate: 1e-2,
            seed: 0,
            record_timing: false,
        }
    }
}

/// Where a run stands: `step` counts completed steps across both stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub theta: PolicyParams,
    /// Frozen at the start of RL; `None` before.
    pub reference: Option<PolicyParams>,
    pub step: usize,
}

impl TrainState {
    pub fn new(theta: PolicyParams) -> Self {
        TrainState {
            theta,
            reference: None,
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<StepMetrics>,
}

struct Prepared<'a> {
    samples: &'a [Sample],
    videos: HashMap<String, Video>,
}

impl Prepared<'_> {
    fn sequence(&self, engine: &Engine, sample: &Sample) -> Result<MultimodalSequence> {
        let video = &self.videos[&sample.video_id()];
        build_sequence(engine.embeddings(video)?, sample)
    }

    fn pick(&self, rng: &mut impl Rng, n: usize) -> Vec<&Sample> {
        (0..n).map(|_| &self.samples[rng.random_range(0..self.samples.len())]).collect()
    }
}

fn sft_step(
    state: &mut TrainState,
    prep: &Prepared,
    engine: &Engine,
    cfg: &LoopConfig,
    step: usize,
) -> Result<StepMetrics> {
    let picked = prep.pick(&mut rng::stream(cfg.seed, &[SFT_STREAM, step as u64]), cfg.batch_size);
    let theta = &state.theta;
    let results = picked
        .par_iter()
        .map(|s| sft_loss_and_grad(theta, &prep.sequence(engine, s)?, &sft_target(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    let n = results.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    check_finite(&grad, "gradient")?;
    for (p, g) in state.theta.as_mut_slice().iter_mut().zip(&grad) {
        *p -= cfg.sft_learning_rate * g;
    }
    Ok(StepMetrics {
        loss: loss / n,
        ..StepMetrics::empty("sft")
    })
}

/// Rolls out, scores and advantages one group per picked sample; reference
/// tables come from the engine's sharded prefill.
fn collect_batch(
    theta: &PolicyParams,
    reference: &Arc<PolicyParams>,
    prep: &Prepared,
    engine: &Engine,
    cfg: &LoopConfig,
    step: usize,
    vocab: &Vocab,
) -> Result<GroupBatch> {
    let picked = prep.pick(&mut rng::stream(cfg.seed, &[RL_STREAM, step as u64]), cfg.batch_size);
    let g = cfg.grpo;
    let per_sample = picked
        .par_iter()
        .enumerate()
        .map(|(i, sample)| -> Result<(RolloutGroup, MultimodalSequence)> {
            let mut rng = rng::stream(cfg.seed, &[RL_STREAM, step as u64, i as u64]);
            let mut rollouts = Vec::with_capacity(g.group_size);
            let mut seq = None;
            for _ in 0..g.group_size {
                // Each rollout fetches the video's embeddings; the cache decides whether that re-encodes.
                let s = prep.sequence(engine, sample)?;
                let mut r: Rollout = sample_rollout(theta, &s, g.temperature, g.max_len, &mut rng)?;
                r.reward = Some(score(&r.tokens, vocab, sample.gold_answer, &cfg.rewards)?);
                rollouts.push(r);
                seq = Some(s);
            }
            let group = RolloutGroup::with_advantages(sample.id.clone(), rollouts, g.std_floor)?;
            Ok((group, seq.expect("group size is at least 2")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (groups, sequences): (Vec<_>, Vec<_>) = per_sample.into_iter().unzip();

    let mut contexts = Vec::new();
    let mut tokens = Vec::new();
    for (group, seq) in groups.iter().zip(&sequences) {
        let ctx = context_vector(seq, reference)?;
        for r in &group.rollouts {
            contexts.push(ctx.clone());
            tokens.push(r.tokens.clone());
        }
    }
    let mut logits = engine.prefill(reference, contexts, &tokens)?.into_iter();
    let ref_log_probs = groups
        .iter()
        .map(|group| {
            group
                .rollouts
                .iter()
                .map(|_| logits.next().expect("one table per rollout").iter().map(|l| log_softmax(l)).collect())
                .collect()
        })
        .collect();
    Ok(GroupBatch {
        groups,
        sequences,
        ref_log_probs: Some(ref_log_probs),
    })
}

/// Runs the remaining steps of `stages` from `state`, calling `sink` after every step.
///
/// The reference policy is snapshotted from θ when the loop first enters RL.
pub fn train_loop(
    dataset: &[Sample],
    engine: &Engine,
    cfg: &LoopConfig,
    stages: StageSteps,
    mut state: TrainState,
    sink: &mut dyn FnMut(&StepMetrics, &TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(invalid!("training dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid!("batch size must be at least 1"));
    }
    cfg.grpo.validate()?;
    cfg.rewards.validate()?;
    let vocab = Vocab::new(state.theta.dims().vocab)?;
    let mut videos = HashMap::new();
    for s in dataset {
        s.validate()?;
        if !videos.contains_key(&s.video_id()) {
            videos.insert(s.video_id(), s.video.generate()?);
        }
    }
    let prep = Prepared {
        samples: dataset,
        videos,
    };

    let mut history = Vec::new();
    let mut reference: Option<Arc<PolicyParams>> = state.reference.clone().map(Arc::new);
    while state.step < stages.total() {
        let step = state.step + 1;
        let start = Instant::now();
        let mut metrics = if step <= stages.sft_steps {
            sft_step(&mut state, &prep, engine, cfg, step)?
        } else {
            let frozen = reference.get_or_insert_with(|| Arc::new(state.theta.clone()));
            if state.reference.is_none() {
                state.reference = Some((**frozen).clone());
            }
            let frozen = Arc::clone(frozen);
            let batch = collect_batch(&state.theta, &frozen, &prep, engine, cfg, step, &vocab)?;
            train_step(&mut state.theta, &frozen, &batch, &cfg.grpo)?
        };
        metrics.step = step;
        if cfg.record_timing {
            metrics.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        state.step = step;
        log::debug!("step {step} {} loss {:.6} reward {:.4}", metrics.stage, metrics.loss, metrics.mean_reward);
        sink(&metrics, &state)?;
        history.push(metrics);
    }
    Ok(TrainOutcome { state, history })
}
