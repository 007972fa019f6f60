//! Frozen frame encoder and the toy autoregressive policy.
//!
//! The policy pools the prompt into a single context vector and then runs a
//! one-layer recurrent step per generated token:
//!
//! ```text
//! ctx    = mean(frame embeddings ++ E_txt[question tokens])
//! s_t    = tanh(A ctx + B E_txt[y_{t-1}] + c)
//! logits = U s_t + b
//! ```
//!
//! with `y_{-1} = EOS`. All parameters live in one flat vector so optimizers,
//! gradients and checkpoints share a single layout.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::mmseq::{Frame, MultimodalSequence, TokenId, EOS};
use crate::rewards::RewardBreakdown;
use crate::rng;

pub const DEFAULT_HIDDEN: usize = 32;
const ENCODER_GAIN: f64 = 3.0;

/// Frozen projection from raw frame features to embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    embed_dim: usize,
    feature_dim: usize,
    weights: Vec<f64>,
}

impl EncoderParams {
    /// Deterministic weights from a seed, uniform with variance `gain² / (3p)`.
    pub fn from_seed(seed: u64, embed_dim: usize, feature_dim: usize) -> Self {
        let mut rng = rng::stream(seed, &[0x656e63]);
        let scale = ENCODER_GAIN / (feature_dim as f64).sqrt();
        let weights = (0..embed_dim * feature_dim)
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        EncoderParams {
            embed_dim,
            feature_dim,
            weights,
        }
    }

    pub fn from_weights(embed_dim: usize, feature_dim: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != embed_dim * feature_dim {
            return Err(invalid!("encoder weights length {} != {embed_dim}x{feature_dim}", weights.len()));
        }
        Ok(EncoderParams {
            embed_dim,
            feature_dim,
            weights,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// `tanh(W_enc · features)`.
pub fn encode_frame(enc: &EncoderParams, frame: &Frame) -> Result<Vec<f64>> {
    if frame.features.len() != enc.feature_dim {
        return Err(invalid!(
            "frame has {} features, encoder expects {}",
            frame.features.len(),
            enc.feature_dim
        ));
    }
    Ok(enc
        .weights
        .chunks(enc.feature_dim)
        .map(|row| dot(row, &frame.features).tanh())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PolicyDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl PolicyDims {
    pub fn num_params(&self) -> usize {
        let PolicyDims { vocab: v, embed: d, hidden: h } = *self;
        v * d + 2 * h * d + h + v * h + v
    }

    fn layout(&self) -> Layout {
        let PolicyDims { vocab: v, embed: d, hidden: h } = *self;
        let tok = 0;
        let ctx = tok + v * d;
        let prev = ctx + h * d;
        let bias_h = prev + h * d;
        let out = bias_h + h;
        let bias_v = out + v * h;
        Layout {
            tok,
            ctx,
            prev,
            bias_h,
            out,
            bias_v,
        }
    }
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    tok: usize,
    ctx: usize,
    prev: usize,
    bias_h: usize,
    out: usize,
    bias_v: usize,
}

/// Policy parameters flattened into a single vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        PolicyParams {
            dims,
            theta: vec![0.0; dims.num_params()],
        }
    }

    /// Uniform init in `[-scale, scale]`.
    pub fn random(dims: PolicyDims, scale: f64, rng: &mut impl Rng) -> Self {
        let theta = (0..dims.num_params())
            .map(|_| scale * rng.random_range(-1.0..1.0))
            .collect();
        PolicyParams { dims, theta }
    }

    pub fn from_vec(dims: PolicyDims, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != dims.num_params() {
            return Err(invalid!("parameter vector has {} entries, expected {}", theta.len(), dims.num_params()));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("parameter vector contains non-finite entries".into()));
        }
        Ok(PolicyParams { dims, theta })
    }

    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn token_embedding(&self, token: TokenId) -> &[f64] {
        let d = self.dims.embed;
        let start = self.dims.layout().tok + token as usize * d;
        &self.theta[start..start + d]
    }

    /// Adds `value` to the output bias of `token`.
    pub fn bump_output_bias(&mut self, token: TokenId, value: f64) {
        let at = self.dims.layout().bias_v + token as usize;
        self.theta[at] += value;
    }

    fn block(&self, offset: usize, len: usize) -> &[f64] {
        &self.theta[offset..offset + len]
    }

    fn check_token(&self, token: TokenId) -> Result<()> {
        if (token as usize) < self.dims.vocab {
            Ok(())
        } else {
            Err(invalid!("token id {token} out of range for vocab {}", self.dims.vocab))
        }
    }
}

/// A sampled response with the log-probs of the policy that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    pub old_logprobs: Vec<f64>,
    pub reward: Option<RewardBreakdown>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Mean over all prompt positions: frame embeddings, then question-token rows of `E_txt`.
pub fn context_vector(seq: &MultimodalSequence, params: &PolicyParams) -> Result<Vec<f64>> {
    let d = params.dims.embed;
    if seq.total_len() == 0 {
        return Err(invalid!("empty sequence"));
    }
    let mut ctx = vec![0.0; d];
    for e in seq.frame_embeddings.iter() {
        if e.len() != d {
            return Err(invalid!("frame embedding dim {} != policy embed dim {d}", e.len()));
        }
        ctx.iter_mut().zip(e).for_each(|(c, x)| *c += x);
    }
    for &t in &seq.text_tokens {
        params.check_token(t)?;
        ctx.iter_mut().zip(params.token_embedding(t)).for_each(|(c, x)| *c += x);
    }
    let n = seq.total_len() as f64;
    ctx.iter_mut().for_each(|c| *c /= n);
    Ok(ctx)
}

fn hidden(params: &PolicyParams, context: &[f64], prev: TokenId) -> Vec<f64> {
    let PolicyDims { embed: d, hidden: h, .. } = params.dims;
    let lay = params.dims.layout();
    let a = params.block(lay.ctx, h * d);
    let b = params.block(lay.prev, h * d);
    let c = params.block(lay.bias_h, h);
    let e_prev = params.token_embedding(prev);
    (0..h)
        .map(|i| {
            let row = i * d..(i + 1) * d;
            (dot(&a[row.clone()], context) + dot(&b[row], e_prev) + c[i]).tanh()
        })
        .collect()
}

fn output(params: &PolicyParams, s: &[f64]) -> Vec<f64> {
    let PolicyDims { vocab: v, hidden: h, .. } = params.dims;
    let lay = params.dims.layout();
    let u = params.block(lay.out, v * h);
    let b = params.block(lay.bias_v, v);
    (0..v).map(|k| dot(&u[k * h..(k + 1) * h], s) + b[k]).collect()
}

/// Next-token logits given the pooled context and the previous token.
pub fn step_logits(params: &PolicyParams, context: &[f64], prev_token: TokenId) -> Result<Vec<f64>> {
    params.check_token(prev_token)?;
    if context.len() != params.dims.embed {
        return Err(invalid!("context dim {} != {}", context.len(), params.dims.embed));
    }
    Ok(output(params, &hidden(params, context, prev_token)))
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` a hair under 1; fall back to the last token with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples until EOS or `max_len` tokens.
///
/// Sampling uses `softmax(logits / temperature)`; the recorded log-probs are
/// always the temperature-1 log-softmax so they match [`sequence_logprobs`].
pub fn sample_rollout(
    params: &PolicyParams,
    seq: &MultimodalSequence,
    temperature: f64,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    if !(temperature > 0.0) {
        return Err(invalid!("temperature must be positive, got {temperature}"));
    }
    if max_len == 0 {
        return Err(invalid!("max_len must be at least 1"));
    }
    let ctx = context_vector(seq, params)?;
    let mut tokens = Vec::with_capacity(max_len);
    let mut old_logprobs = Vec::with_capacity(max_len);
    let mut prev = EOS;
    while tokens.len() < max_len {
        let logits = step_logits(params, &ctx, prev)?;
        let logp = log_softmax(&logits);
        let probs: Vec<f64> = if temperature == 1.0 {
            logp.iter().map(|l| l.exp()).collect()
        } else {
            let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
            log_softmax(&scaled).iter().map(|l| l.exp()).collect()
        };
        let tok = sample_index(&probs, rng.random::<f64>()) as TokenId;
        tokens.push(tok);
        old_logprobs.push(logp[tok as usize]);
        if tok == EOS {
            break;
        }
        prev = tok;
    }
    Ok(Rollout {
        tokens,
        old_logprobs,
        reward: None,
    })
}

/// Argmax decoding (lowest id on ties).
pub fn greedy_decode(params: &PolicyParams, seq: &MultimodalSequence, max_len: usize) -> Result<Vec<TokenId>> {
    let ctx = context_vector(seq, params)?;
    let mut tokens = Vec::with_capacity(max_len);
    let mut prev = EOS;
    while tokens.len() < max_len {
        let logits = step_logits(params, &ctx, prev)?;
        let mut best = 0;
        for (k, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = k;
            }
        }
        let tok = best as TokenId;
        tokens.push(tok);
        if tok == EOS {
            break;
        }
        prev = tok;
    }
    Ok(tokens)
}

/// Teacher-forced forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub context: Vec<f64>,
    pub positions: Vec<PositionTrace>,
}

#[derive(Debug, Clone)]
pub struct PositionTrace {
    pub prev: TokenId,
    pub target: TokenId,
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl PositionTrace {
    pub fn target_logprob(&self) -> f64 {
        self.log_probs[self.target as usize]
    }
}

pub fn forward_trace(params: &PolicyParams, seq: &MultimodalSequence, tokens: &[TokenId]) -> Result<Trace> {
    if tokens.is_empty() {
        return Err(invalid!("token list is empty"));
    }
    for &t in tokens {
        params.check_token(t)?;
    }
    let context = context_vector(seq, params)?;
    let mut prev = EOS;
    let positions = tokens
        .iter()
        .map(|&target| {
            let s = hidden(params, &context, prev);
            let log_probs = log_softmax(&output(params, &s));
            let pos = PositionTrace {
                prev,
                target,
                hidden: s,
                log_probs,
            };
            prev = target;
            pos
        })
        .collect();
    Ok(Trace { context, positions })
}

/// Accumulates `∂L/∂θ` into `grad` given `∂L/∂logits` for every traced position.
pub fn backward(
    params: &PolicyParams,
    seq: &MultimodalSequence,
    trace: &Trace,
    dlogits: &[Vec<f64>],
    grad: &mut [f64],
) {
    let PolicyDims { vocab: v, embed: d, hidden: h } = params.dims;
    let lay = params.dims.layout();
    assert_eq!(grad.len(), params.len());
    assert_eq!(dlogits.len(), trace.positions.len());
    let a = params.block(lay.ctx, h * d);
    let b = params.block(lay.prev, h * d);
    let u = params.block(lay.out, v * h);

    let mut dctx = vec![0.0; d];
    let mut dz = vec![0.0; h];
    for (pos, g) in trace.positions.iter().zip(dlogits) {
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let s = &pos.hidden;
        for k in 0..v {
            grad[lay.bias_v + k] += g[k];
            let row = &mut grad[lay.out + k * h..lay.out + (k + 1) * h];
            row.iter_mut().zip(s).for_each(|(r, sj)| *r += g[k] * sj);
        }
        for j in 0..h {
            let ds: f64 = (0..v).map(|k| u[k * h + j] * g[k]).sum();
            dz[j] = ds * (1.0 - s[j] * s[j]);
        }
        let e_prev = params.token_embedding(pos.prev).to_vec();
        let prev_row = lay.tok + pos.prev as usize * d;
        for i in 0..h {
            grad[lay.bias_h + i] += dz[i];
            for k in 0..d {
                grad[lay.ctx + i * d + k] += dz[i] * trace.context[k];
                grad[lay.prev + i * d + k] += dz[i] * e_prev[k];
                dctx[k] += a[i * d + k] * dz[i];
                grad[prev_row + k] += b[i * d + k] * dz[i];
            }
        }
    }
    let n = seq.total_len() as f64;
    for &t in &seq.text_tokens {
        let row = lay.tok + t as usize * d;
        for k in 0..d {
            grad[row + k] += dctx[k] / n;
        }
    }
}

/// Per-token `log π(y_t | context, y_<t)` under teacher forcing.
pub fn sequence_logprobs(params: &PolicyParams, seq: &MultimodalSequence, tokens: &[TokenId]) -> Result<Vec<f64>> {
    Ok(forward_trace(params, seq, tokens)?
        .positions
        .iter()
        .map(PositionTrace::target_logprob)
        .collect())
}

/// `Σ_v p(v) (log p(v) − log q(v))` for two log-prob vectors.
pub fn kl_divergence(log_p: &[f64], log_q: &[f64]) -> f64 {
    let kl: f64 = log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
    kl.max(0.0)
}

/// Exact KL(π_θ ‖ π_ref) over the full vocabulary at each generated position.
pub fn kl_per_position(
    theta: &PolicyParams,
    reference: &PolicyParams,
    seq: &MultimodalSequence,
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    if theta.dims != reference.dims {
        return Err(invalid!("policy dims {:?} differ from reference {:?}", theta.dims, reference.dims));
    }
    let t = forward_trace(theta, seq, tokens)?;
    let r = forward_trace(reference, seq, tokens)?;
    Ok(t.positions
        .iter()
        .zip(&r.positions)
        .map(|(a, b)| kl_divergence(&a.log_probs, &b.log_probs))
        .collect())
}

const CHECKPOINT_HEADER: usize = 16;

/// Writes `{V, d, h, p}` as little-endian u32 followed by θ as little-endian f64.
pub fn write_checkpoint(path: &Path, params: &PolicyParams, feature_dim: usize) -> Result<()> {
    let PolicyDims { vocab, embed, hidden } = params.dims;
    let mut buf = Vec::with_capacity(CHECKPOINT_HEADER + 8 * params.len());
    for v in [vocab, embed, hidden, feature_dim] {
        let v = u32::try_from(v).map_err(|_| invalid!("dimension {v} does not fit in u32"))?;
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for x in &params.theta {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    // Write-then-rename so an interrupted run never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Returns the parameters and the encoder feature dim recorded in the header.
pub fn read_checkpoint(path: &Path) -> Result<(PolicyParams, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    if bytes.len() < CHECKPOINT_HEADER {
        return Err(bad("checkpoint shorter than header".into()));
    }
    let header: Vec<usize> = bytes[..CHECKPOINT_HEADER]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let dims = PolicyDims {
        vocab: header[0],
        embed: header[1],
        hidden: header[2],
    };
    let body = &bytes[CHECKPOINT_HEADER..];
    if body.len() != 8 * dims.num_params() {
        return Err(bad(format!(
            "checkpoint body has {} bytes, expected {} for {dims:?}",
            body.len(),
            8 * dims.num_params()
        )));
    }
    let theta = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((PolicyParams::from_vec(dims, theta)?, header[3]))
}
