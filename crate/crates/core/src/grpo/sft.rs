use crate::error::{invalid, Result};
use crate::mmseq::{Sample, TokenId, ANS_CLOSE, ANS_OPEN, EOS, THINK_CLOSE, THINK_OPEN};
use crate::policy::{self, forward_trace, PolicyParams};
use crate::mmseq::MultimodalSequence;

/// Annotated warm-up target: the family's fixed reasoning span followed by the gold letter.
pub fn sft_target(sample: &Sample) -> Vec<TokenId> {
    let mut t = vec![THINK_OPEN];
    t.extend(sample.family.reasoning_template());
    t.extend([THINK_CLOSE, ANS_OPEN, sample.gold_answer, ANS_CLOSE, EOS]);
    t
}

/// Mean per-token cross-entropy under teacher forcing, with its gradient.
pub fn sft_loss_and_grad(
    theta: &PolicyParams,
    seq: &MultimodalSequence,
    targets: &[TokenId],
) -> Result<(f64, Vec<f64>)> {
    if targets.is_empty() {
        return Err(invalid!("supervised targets are empty"));
    }
    let trace = forward_trace(theta, seq, targets)?;
    let n = targets.len() as f64;
    let loss = -trace.positions.iter().map(|p| p.target_logprob()).sum::<f64>() / n;
    let dlogits: Vec<Vec<f64>> = trace
        .positions
        .iter()
        .map(|p| {
            let mut g: Vec<f64> = p.log_probs.iter().map(|l| l.exp() / n).collect();
            g[p.target as usize] -= 1.0 / n;
            g
        })
        .collect();
    let mut grad = vec![0.0; theta.len()];
    policy::backward(theta, seq, &trace, &dlogits, &mut grad);
    Ok((loss, grad))
}
