//! Difficulty probing by repeated stochastic answering, and filtering on the labels.
//!
//! A sample answered correctly in every run is Easy, in no run Hard, otherwise
//! Medium. Malformed answers score zero accuracy, so they count as incorrect.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grpo::sft_target;
use crate::mmseq::{build_sequence, Difficulty, Sample, TokenId, Video, Vocab};
use crate::mrsp::serial_encode;
use crate::policy::{sample_rollout, EncoderParams, PolicyParams};
use crate::rewards::{score, RewardConfig};
use crate::rng;

pub const DEFAULT_RUNS: usize = 10;
const PROBE_STREAM: u64 = 0x9_0b3;

/// Anything that answers a sample with a token sequence.
pub trait AnswerModel: Sync {
    fn answer(&self, sample: &Sample, run: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>>;
}

/// Samples answers from a policy checkpoint.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub params: PolicyParams,
    pub encoder: EncoderParams,
    pub temperature: f64,
    pub max_len: usize,
}

impl AnswerModel for PolicyModel {
    fn answer(&self, sample: &Sample, _run: usize, rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        let video: Video = sample.video.generate()?;
        let seq = build_sequence(serial_encode(&self.encoder, &video)?.into(), sample)?;
        Ok(sample_rollout(&self.params, &seq, self.temperature, self.max_len, rng)?.tokens)
    }
}

/// Scripted outcomes for tests: run `r` on `s` is correct iff `correct(s, r)`.
pub struct StubModel<F: Fn(&Sample, usize) -> bool + Sync> {
    pub correct: F,
}

impl<F: Fn(&Sample, usize) -> bool + Sync> AnswerModel for StubModel<F> {
    fn answer(&self, sample: &Sample, run: usize, _rng: &mut ChaCha8Rng) -> Result<Vec<TokenId>> {
        let mut tokens = sft_target(sample);
        if !(self.correct)(sample, run) {
            let n = sample.family.num_choices() as TokenId;
            let gold = sample.gold_answer - Vocab::letter(0);
            let wrong = Vocab::letter(((gold + 1) % n) as usize);
            let at = tokens.iter().position(|&t| t == sample.gold_answer).expect("target holds the gold letter");
            tokens[at] = wrong;
        }
        Ok(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub sample_id: String,
    pub n_runs: usize,
    pub n_correct: usize,
    pub label: Difficulty,
}

/// Inclusive range of correct counts labeled Medium.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelBand {
    pub lo: usize,
    pub hi: usize,
}

impl LabelBand {
    /// All-or-nothing: Medium iff `1 ≤ n_correct ≤ n − 1`.
    pub fn strict(n_runs: usize) -> Self {
        LabelBand {
            lo: 1,
            hi: n_runs.saturating_sub(1),
        }
    }

    pub fn label(&self, n_correct: usize) -> Difficulty {
        if n_correct < self.lo {
            Difficulty::Hard
        } else if n_correct > self.hi {
            Difficulty::Easy
        } else {
            Difficulty::Medium
        }
    }
}

pub fn label_for(n_correct: usize, n_runs: usize) -> Difficulty {
    LabelBand::strict(n_runs).label(n_correct)
}

/// `n_runs` sequential answers on one stream.
pub fn probe(
    model: &dyn AnswerModel,
    sample: &Sample,
    n_runs: usize,
    band: Option<LabelBand>,
    rewards: &RewardConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeResult> {
    if n_runs == 0 {
        return Err(invalid!("probe needs at least one run"));
    }
    let vocab = Vocab::new(crate::mmseq::DEFAULT_VOCAB.max(sample.gold_answer as usize + 1))?;
    let mut n_correct = 0;
    for run in 0..n_runs {
        let tokens = model.answer(sample, run, rng)?;
        if score(&tokens, &vocab, sample.gold_answer, rewards)?.accuracy == 1.0 {
            n_correct += 1;
        }
    }
    Ok(ProbeResult {
        sample_id: sample.id.clone(),
        n_runs,
        n_correct,
        label: band.unwrap_or(LabelBand::strict(n_runs)).label(n_correct),
    })
}

/// Probes every sample concurrently, each on its own stream derived from
/// `seed` and the sample's position.
pub fn probe_dataset(
    model: &dyn AnswerModel,
    samples: &[Sample],
    n_runs: usize,
    band: Option<LabelBand>,
    rewards: &RewardConfig,
    seed: u64,
) -> Result<Vec<ProbeResult>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| probe(model, s, n_runs, band, rewards, &mut rng::stream(seed, &[PROBE_STREAM, i as u64])))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct FilterSummary {
    pub counts: BTreeMap<Difficulty, usize>,
    pub retained: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub retained: Vec<Sample>,
    pub dropped: Vec<Sample>,
    pub summary: FilterSummary,
}

pub fn default_keep() -> BTreeSet<Difficulty> {
    BTreeSet::from([Difficulty::Medium])
}

/// Writes each sample's probe label into its difficulty and splits on `keep`.
pub fn filter_dataset(samples: &[Sample], probes: &[ProbeResult], keep: &BTreeSet<Difficulty>) -> Result<FilterOutcome> {
    let labels: HashMap<&str, Difficulty> = probes.iter().map(|p| (p.sample_id.as_str(), p.label)).collect();
    let mut out = FilterOutcome {
        retained: Vec::new(),
        dropped: Vec::new(),
        summary: FilterSummary::default(),
    };
    for s in samples {
        let label = *labels
            .get(s.id.as_str())
            .ok_or_else(|| Error::State(format!("sample {} was not probed", s.id)))?;
        *out.summary.counts.entry(label).or_default() += 1;
        let labeled = Sample {
            difficulty: label,
            ..s.clone()
        };
        if keep.contains(&label) {
            out.retained.push(labeled);
        } else {
            out.dropped.push(labeled);
        }
    }
    out.summary.retained = out.retained.len();
    out.summary.dropped = out.dropped.len();
    Ok(out)
}

pub fn write_probe_summary(path: &Path, probes: &[ProbeResult]) -> Result<()> {
    let mut out = String::new();
    for p in probes {
        out.push_str(&serde_json::to_string(p).expect("probe serializes"));
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}
