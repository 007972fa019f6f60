//! Group relative policy optimization.
//!
//! For a group of `G` rollouts `o_i` with rewards `r_i`:
//!
//! ```text
//! A_i    = (r_i − mean(r)) / std(r)                       (population std)
//! ρ_it   = exp(log π_θ(y_it) − log π_old(y_it))
//! J      = 1/G Σ_i 1/|o_i| Σ_t min(ρ_it A_i, clip(ρ_it, 1−ε, 1+ε) A_i)
//!          − β · mean_{i,t} KL(π_θ ‖ π_ref)
//! ```
//!
//! The KL term averages over every generated position of the group and is
//! either the exact divergence over the vocabulary or the sampled k3 estimate.
//! Gradients are exact and computed in closed form through [`policy::backward`].

mod sft;
pub mod train;

pub use sft::{sft_loss_and_grad, sft_target};
pub use train::{train_loop, train_step, GroupBatch, LoopConfig, StageSteps, StepMetrics, TrainOutcome, TrainState};

use crate::error::{invalid, Error, Result};
use crate::mmseq::MultimodalSequence;
use crate::policy::{self, forward_trace, kl_divergence, PolicyParams, Rollout};

/// Per-rollout, per-position log-softmax of the reference policy.
pub type RefLogProbs = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlEstimator {
    /// Full-vocabulary divergence at each position.
    #[default]
    Exact,
    /// `exp(δ) − δ − 1` with `δ = log π_ref(y) − log π_θ(y)` at the sampled token.
    K3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub max_len: usize,
    pub temperature: f64,
    pub std_floor: f64,
    pub kl_estimator: KlEstimator,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.04,
            learning_rate: 1e-2,
            max_len: 12,
            temperature: 1.0,
            std_floor: 1e-8,
            kl_estimator: KlEstimator::Exact,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid!("group size must be at least 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(invalid!("clip epsilon must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(invalid!("kl beta must be non-negative, got {}", self.kl_beta));
        }
        if !(self.temperature > 0.0) {
            return Err(invalid!("temperature must be positive, got {}", self.temperature));
        }
        if self.max_len == 0 {
            return Err(invalid!("max_len must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.std_floor >= 0.0) {
            return Err(invalid!("learning rate and std floor must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub values: Vec<f64>,
}

impl Advantages {
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&a| a == 0.0)
    }
}

/// Group-normalized advantages; groups whose reward std is at or below
/// `std_floor` get exact zeros.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Advantages> {
    if rewards.len() < 2 {
        return Err(invalid!("advantages need a group of at least 2 rewards, got {}", rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let values = if std <= std_floor {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(Advantages { values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub sample_id: String,
    pub rollouts: Vec<Rollout>,
    pub advantages: Option<Advantages>,
}

impl RolloutGroup {
    /// Computes advantages from the rollouts' total rewards.
    pub fn with_advantages(sample_id: String, rollouts: Vec<Rollout>, std_floor: f64) -> Result<Self> {
        let rewards = rollouts
            .iter()
            .map(|r| {
                r.reward
                    .map(|b| b.total)
                    .ok_or_else(|| Error::State("rollout has not been scored".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let advantages = compute_advantages(&rewards, std_floor)?;
        Ok(RolloutGroup {
            sample_id,
            rollouts,
            advantages: Some(advantages),
        })
    }
}

/// Objective value and bookkeeping for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEval {
    pub objective: f64,
    pub clip_term: f64,
    /// Mean KL over generated positions, measured with the configured estimator.
    pub kl_term: f64,
    /// Mean exact KL, reported regardless of the estimator.
    pub exact_kl: f64,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
    pub gradient: Option<Vec<f64>>,
}

/// Reference log-softmax tables for every rollout position.
pub fn reference_log_probs(
    reference: &PolicyParams,
    seq: &MultimodalSequence,
    group: &RolloutGroup,
) -> Result<RefLogProbs> {
    group
        .rollouts
        .iter()
        .map(|r| {
            Ok(forward_trace(reference, seq, &r.tokens)?
                .positions
                .into_iter()
                .map(|p| p.log_probs)
                .collect())
        })
        .collect()
}

/// Whether the min in the surrogate picks the constant clipped branch.
fn clip_active(ratio: f64, advantage: f64, eps: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + eps) || (advantage < 0.0 && ratio < 1.0 - eps)
}

/// Evaluates the objective (and optionally its gradient) against precomputed
/// reference log-probs.
pub fn evaluate_group(
    group: &RolloutGroup,
    theta: &PolicyParams,
    ref_log_probs: &RefLogProbs,
    seq: &MultimodalSequence,
    cfg: &GrpoConfig,
    with_gradient: bool,
) -> Result<GroupEval> {
    let advantages = group
        .advantages
        .as_ref()
        .ok_or_else(|| Error::State(format!("group {} has no advantages", group.sample_id)))?;
    if advantages.values.len() != group.rollouts.len() || ref_log_probs.len() != group.rollouts.len() {
        return Err(Error::State(format!(
            "group {}: {} rollouts, {} advantages, {} reference tables",
            group.sample_id,
            group.rollouts.len(),
            advantages.values.len(),
            ref_log_probs.len()
        )));
    }
    let g = group.rollouts.len() as f64;
    let total_tokens: usize = group.rollouts.iter().map(|r| r.tokens.len()).sum();
    let n_positions = total_tokens as f64;
    let eps = cfg.clip_eps;

    let mut clip_term = 0.0;
    let mut kl_sum = 0.0;
    let mut exact_kl_sum = 0.0;
    let mut clipped_tokens = 0;
    let mut gradient = with_gradient.then(|| vec![0.0; theta.len()]);

    for ((rollout, &adv), ref_lp) in group.rollouts.iter().zip(&advantages.values).zip(ref_log_probs) {
        if rollout.old_logprobs.len() != rollout.tokens.len() || ref_lp.len() != rollout.tokens.len() {
            return Err(Error::State(format!("group {}: rollout bookkeeping length mismatch", group.sample_id)));
        }
        let trace = forward_trace(theta, seq, &rollout.tokens)?;
        let len = rollout.tokens.len() as f64;
        let mut seq_term = 0.0;
        let mut dlogits = with_gradient.then(|| Vec::with_capacity(rollout.tokens.len()));

        for ((pos, &old), lq) in trace.positions.iter().zip(&rollout.old_logprobs).zip(ref_lp) {
            let y = pos.target as usize;
            let lp = &pos.log_probs;
            let ratio = (lp[y] - old).exp();
            let clipped = clip_active(ratio, adv, eps);
            if clipped {
                clipped_tokens += 1;
            }
            seq_term += (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv);

            let exact = kl_divergence(lp, lq);
            exact_kl_sum += exact;
            let delta = lq[y] - lp[y];
            kl_sum += match cfg.kl_estimator {
                KlEstimator::Exact => exact,
                KlEstimator::K3 => delta.exp() - delta - 1.0,
            };

            if let Some(dl) = dlogits.as_mut() {
                let mut g_pos = vec![0.0; lp.len()];
                // d log π(y) / d logits = onehot(y) − p
                let policy_coeff = if clipped || adv == 0.0 { 0.0 } else { ratio * adv / (g * len) };
                if policy_coeff != 0.0 {
                    for (k, gk) in g_pos.iter_mut().enumerate() {
                        *gk -= policy_coeff * lp[k].exp();
                    }
                    g_pos[y] += policy_coeff;
                }
                if cfg.kl_beta != 0.0 {
                    let scale = cfg.kl_beta / n_positions;
                    match cfg.kl_estimator {
                        KlEstimator::Exact => {
                            let raw: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
                            for (k, gk) in g_pos.iter_mut().enumerate() {
                                *gk -= scale * lp[k].exp() * (lp[k] - lq[k] - raw);
                            }
                        }
                        KlEstimator::K3 => {
                            let c = scale * (1.0 - delta.exp());
                            for (k, gk) in g_pos.iter_mut().enumerate() {
                                *gk += c * lp[k].exp();
                            }
                            g_pos[y] -= c;
                        }
                    }
                }
                dl.push(g_pos);
            }
        }
        clip_term += seq_term / len;
        if let (Some(grad), Some(dl)) = (gradient.as_mut(), dlogits.as_ref()) {
            policy::backward(theta, seq, &trace, dl, grad);
        }
    }

    let clip_term = clip_term / g;
    let kl_term = kl_sum / n_positions;
    Ok(GroupEval {
        objective: clip_term - cfg.kl_beta * kl_term,
        clip_term,
        kl_term,
        exact_kl: exact_kl_sum / n_positions,
        clipped_tokens,
        total_tokens,
        gradient,
    })
}

pub fn grpo_objective(
    group: &RolloutGroup,
    theta: &PolicyParams,
    reference: &PolicyParams,
    seq: &MultimodalSequence,
    cfg: &GrpoConfig,
) -> Result<f64> {
    let ref_lp = reference_log_probs(reference, seq, group)?;
    Ok(evaluate_group(group, theta, &ref_lp, seq, cfg, false)?.objective)
}

/// `∂J/∂θ`, treating old log-probs and advantages as constants.
pub fn grpo_gradient(
    group: &RolloutGroup,
    theta: &PolicyParams,
    reference: &PolicyParams,
    seq: &MultimodalSequence,
    cfg: &GrpoConfig,
) -> Result<Vec<f64>> {
    let ref_lp = reference_log_probs(reference, seq, group)?;
    let eval = evaluate_group(group, theta, &ref_lp, seq, cfg, true)?;
    Ok(eval.gradient.expect("gradient requested"))
}
