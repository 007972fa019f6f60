//! Builders and numeric helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use mrsp_core::grpo::{
    compute_advantages, evaluate_group, reference_log_probs, GrpoConfig, KlEstimator, RefLogProbs, RolloutGroup,
};
use mrsp_core::mmseq::{MultimodalSequence, TokenId};
use mrsp_core::policy::{sequence_logprobs, PolicyDims, PolicyParams, Rollout};

pub const SMALL: PolicyDims = PolicyDims {
    vocab: 8,
    embed: 4,
    hidden: 6,
};

/// One GRPO group on a small policy, with everything the objective needs.
pub struct SmallCase {
    pub theta: PolicyParams,
    pub reference: PolicyParams,
    pub seq: MultimodalSequence,
    pub group: RolloutGroup,
    pub ref_lp: RefLogProbs,
    pub cfg: GrpoConfig,
}

impl SmallCase {
    pub fn objective(&self, theta: &PolicyParams) -> f64 {
        evaluate_group(&self.group, theta, &self.ref_lp, &self.seq, &self.cfg, false)
            .unwrap()
            .objective
    }

    pub fn gradient(&self) -> Vec<f64> {
        evaluate_group(&self.group, &self.theta, &self.ref_lp, &self.seq, &self.cfg, true)
            .unwrap()
            .gradient
            .unwrap()
    }
}

pub fn random_seq(rng: &mut ChaCha8Rng, embed: usize, vocab: usize) -> MultimodalSequence {
    let frames = rng.random_range(1..=5);
    MultimodalSequence {
        frame_embeddings: Arc::new(
            (0..frames)
                .map(|_| (0..embed).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        ),
        text_tokens: random_tokens(rng, vocab, 1, 4),
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, min_len: usize, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(min_len..=max_len);
    (0..len).map(|_| rng.random_range(0..vocab as TokenId)).collect()
}

/// Rewards drawn from the values the rule-based reward can take, resampled
/// until the group is non-degenerate.
pub fn random_rewards(rng: &mut ChaCha8Rng, g: usize) -> Vec<f64> {
    loop {
        let r: Vec<f64> = (0..g).map(|_| [0.0, 0.5, 1.0, 1.5][rng.random_range(0..4)]).collect();
        if r.iter().any(|&x| x != r[0]) {
            return r;
        }
    }
}

/// A random group whose old log-probs sit off the current policy by up to
/// `spread` nats, nudged so no ratio lies within `margin` of a clip boundary.
pub fn random_case(rng: &mut ChaCha8Rng, g: usize, spread: f64, margin: f64) -> SmallCase {
    let theta = PolicyParams::random(SMALL, 0.5, rng);
    let reference = PolicyParams::random(SMALL, 0.5, rng);
    let seq = random_seq(rng, SMALL.embed, SMALL.vocab);
    let estimator = if rng.random_bool(0.5) {
        KlEstimator::Exact
    } else {
        KlEstimator::K3
    };
    let cfg = GrpoConfig {
        group_size: g,
        kl_beta: if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.01..0.2) },
        kl_estimator: estimator,
        ..GrpoConfig::default()
    };
    let eps = cfg.clip_eps;
    let rollouts = (0..g)
        .map(|_| {
            let tokens = random_tokens(rng, SMALL.vocab, 1, 6);
            let current = sequence_logprobs(&theta, &seq, &tokens).unwrap();
            let old_logprobs = current
                .iter()
                .map(|&lp| loop {
                    let old = lp + rng.random_range(-spread..=spread);
                    let ratio = (lp - old).exp();
                    if (ratio - (1.0 + eps)).abs() > margin && (ratio - (1.0 - eps)).abs() > margin {
                        break old;
                    }
                })
                .collect();
            Rollout {
                tokens,
                old_logprobs,
                reward: None,
            }
        })
        .collect();
    let advantages = compute_advantages(&random_rewards(rng, g), cfg.std_floor).unwrap();
    let group = RolloutGroup {
        sample_id: "case".into(),
        rollouts,
        advantages: Some(advantages),
    };
    let ref_lp = reference_log_probs(&reference, &seq, &group).unwrap();
    SmallCase {
        theta,
        reference,
        seq,
        group,
        ref_lp,
        cfg,
    }
}

/// Central differences of `f` around `theta`, one coordinate at a time.
pub fn finite_difference(theta: &PolicyParams, h: f64, f: impl Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let mut probe = theta.clone();
    (0..theta.len())
        .map(|i| {
            let x = theta.as_slice()[i];
            probe.as_mut_slice()[i] = x + h;
            let up = f(&probe);
            probe.as_mut_slice()[i] = x - h;
            let down = f(&probe);
            probe.as_mut_slice()[i] = x;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`, with a floor on the denominator.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let inf = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = inf(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = inf(&mut a.iter().copied()).max(inf(&mut b.iter().copied())).max(1e-8);
    diff / scale
}

/// Trailing means over every full window of `w` values.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    xs.windows(w).map(|win| win.iter().sum::<f64>() / w as f64).collect()
}

/// Share of consecutive moving-average pairs that do not decrease.
pub fn nondecreasing_fraction(ma: &[f64]) -> f64 {
    if ma.len() < 2 {
        return 1.0;
    }
    let ok = ma.windows(2).filter(|p| p[1] >= p[0] - 1e-12).count();
    ok as f64 / (ma.len() - 1) as f64
}

pub fn write_config(path: &Path, entries: &[(&str, String)]) {
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    std::fs::write(path, text).unwrap();
}
