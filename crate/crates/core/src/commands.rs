//! The `gen`, `filter`, `train`, `eval` and `bench` commands, callable without the binary.
//!
//! Each command writes its human-readable report to the given sink and its
//! artifacts (datasets, JSONL, checkpoints) to disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::filter::{default_keep, filter_dataset, probe_dataset, write_probe_summary, LabelBand, PolicyModel};
use crate::grpo::{train_loop, StepMetrics, TrainState};
use crate::mmseq::{
    build_sequence, gen_task, gen_video, read_dataset, write_dataset, Difficulty, Sample, TaskFamily, Vocab,
};
use crate::mrsp::{bench, render_table, serial_encode, BenchConfig, Engine};
use crate::policy::{greedy_decode, read_checkpoint, sample_rollout, write_checkpoint, EncoderParams, PolicyParams};
use crate::rewards::{score, score_text, RewardBreakdown, RewardConfig};
use crate::rng;

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Synthesizes `n` tasks; family alternates when `family` is `None`.
pub fn generate_samples(n: usize, frames: usize, feature_dim: usize, family: Option<TaskFamily>, seed: u64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let video = gen_video(rng::derive_seed(seed, &[i as u64]), frames, feature_dim)?;
            let family = family.unwrap_or(TaskFamily::ALL[i % TaskFamily::ALL.len()]);
            gen_task(&video, family)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub out: PathBuf,
    pub n_samples: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub family: Option<TaskFamily>,
    pub seed: u64,
}

pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<Vec<Sample>> {
    if args.n_samples == 0 {
        return Err(invalid!("--n-samples must be positive"));
    }
    let samples = generate_samples(args.n_samples, args.frames, args.feature_dim, args.family, args.seed)?;
    write_dataset(&args.out, &samples)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.family.to_string()).or_default() += 1;
    }
    writeln!(out, "wrote {} samples to {}", samples.len(), args.out.display()).map_err(out_err)?;
    for (family, n) in counts {
        writeln!(out, "  {family}: {n}").map_err(out_err)?;
    }
    Ok(samples)
}

/// Checks that the checkpoint can read every sample of `data`.
fn check_compat(params: &PolicyParams, feature_dim: usize, data: &[Sample]) -> Result<()> {
    let vocab = params.dims().vocab;
    for s in data {
        if let Some(t) = s.question_tokens.iter().chain([&s.gold_answer]).find(|&&t| t as usize >= vocab) {
            return Err(invalid!("sample {} uses token {t}, beyond the checkpoint vocab of {vocab}", s.id));
        }
        if s.video.feature_dim != feature_dim {
            return Err(invalid!(
                "sample {} has feature dim {}, checkpoint encoder expects {feature_dim}",
                s.id,
                s.video.feature_dim
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FilterArgs {
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub encoder_seed: u64,
    pub n_runs: usize,
    pub keep: BTreeSet<Difficulty>,
    /// Overrides the all-or-nothing Medium band.
    pub band: Option<LabelBand>,
    pub out: PathBuf,
    /// Defaults to `<out>.probes.jsonl`.
    pub summary: Option<PathBuf>,
    pub seed: u64,
    pub temperature: f64,
    pub max_len: usize,
}

impl FilterArgs {
    pub fn new(data: PathBuf, checkpoint: PathBuf, out: PathBuf) -> Self {
        FilterArgs {
            data,
            checkpoint,
            encoder_seed: 0,
            n_runs: crate::filter::DEFAULT_RUNS,
            keep: default_keep(),
            band: None,
            out,
            summary: None,
            seed: 0,
            temperature: 1.0,
            max_len: 12,
        }
    }
}

pub fn cmd_filter(args: &FilterArgs, out: &mut dyn Write) -> Result<crate::filter::FilterSummary> {
    let samples = read_dataset(&args.data)?;
    let (params, feature_dim) = read_checkpoint(&args.checkpoint)?;
    check_compat(&params, feature_dim, &samples)?;
    let model = PolicyModel {
        encoder: EncoderParams::from_seed(args.encoder_seed, params.dims().embed, feature_dim),
        params,
        temperature: args.temperature,
        max_len: args.max_len,
    };
    let probes = probe_dataset(&model, &samples, args.n_runs, args.band, &RewardConfig::default(), args.seed)?;
    let outcome = filter_dataset(&samples, &probes, &args.keep)?;
    write_dataset(&args.out, &outcome.retained)?;
    let summary_path = args
        .summary
        .clone()
        .unwrap_or_else(|| args.out.with_extension("probes.jsonl"));
    write_probe_summary(&summary_path, &probes)?;
    let s = &outcome.summary;
    let count = |d| s.counts.get(&d).copied().unwrap_or(0);
    writeln!(
        out,
        "probed {} samples x {} runs: easy {} medium {} hard {}; kept {} -> {}",
        samples.len(),
        args.n_runs,
        count(Difficulty::Easy),
        count(Difficulty::Medium),
        count(Difficulty::Hard),
        s.retained,
        args.out.display()
    )
    .map_err(out_err)?;
    Ok(outcome.summary)
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub dry_run: bool,
    /// Continue from the last checkpoint in the output directory.
    pub resume: bool,
    /// Stop once this many total steps are complete, as if interrupted.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Progress {
    step: usize,
}

/// Files a training run keeps in its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub reference: PathBuf,
    pub progress: PathBuf,
    pub final_checkpoint: PathBuf,
    pub config: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            metrics: dir.join("metrics.jsonl"),
            checkpoint: dir.join("checkpoint.bin"),
            reference: dir.join("reference.bin"),
            progress: dir.join("progress.json"),
            final_checkpoint: dir.join("final.bin"),
            config: dir.join("config.txt"),
        }
    }
}

fn load_training_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data {
        Some(path) => read_dataset(path),
        None => generate_samples(cfg.n_samples, cfg.frames, cfg.feature_dim, Some(cfg.family), cfg.data_seed),
    }
}

fn initial_params(cfg: &RunConfig) -> Result<PolicyParams> {
    match &cfg.init_checkpoint {
        Some(path) => {
            let (params, p) = read_checkpoint(path)?;
            if params.dims() != cfg.dims() || p != cfg.feature_dim {
                return Err(invalid!(
                    "init checkpoint has {:?} and feature dim {p}, config asks for {:?} and {}",
                    params.dims(),
                    cfg.dims(),
                    cfg.feature_dim
                ));
            }
            Ok(params)
        }
        None => Ok(PolicyParams::random(cfg.dims(), cfg.init_scale, &mut rng::stream(cfg.train_seed, &[0x1417]))),
    }
}

/// Keeps the first `step` records of a metrics file.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })?;
        if m.step <= step {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps_completed: usize,
    pub last: Option<StepMetrics>,
    pub encoder_invocations: u64,
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<TrainSummary> {
    let cfg = RunConfig::load(&args.config)?;
    cfg.validate()?;
    let stages = cfg.stages();
    if args.dry_run {
        writeln!(out, "# resolved config").map_err(out_err)?;
        write!(out, "{}", cfg.to_text()).map_err(out_err)?;
        writeln!(
            out,
            "# plan: {} sft steps then {} rl steps, batch {} x G={}, sp_degree {}, cache {}, checkpoints every {} steps in {}",
            stages.sft_steps,
            stages.rl_steps,
            cfg.batch_size,
            cfg.grpo.group_size,
            cfg.sp_degree,
            if cfg.cache { "on" } else { "off" },
            cfg.checkpoint_every,
            cfg.out_dir.display()
        )
        .map_err(out_err)?;
        return Ok(TrainSummary {
            steps_completed: 0,
            last: None,
            encoder_invocations: 0,
        });
    }

    let dataset = load_training_data(&cfg)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let paths = RunPaths::new(&cfg.out_dir);
    std::fs::write(&paths.config, cfg.to_text()).map_err(|e| Error::io(&paths.config, e))?;

    let state = if args.resume && paths.progress.exists() {
        let text = std::fs::read_to_string(&paths.progress).map_err(|e| Error::io(&paths.progress, e))?;
        let progress: Progress = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: paths.progress.clone(),
            line: 1,
            msg: e.to_string(),
        })?;
        let (theta, _) = read_checkpoint(&paths.checkpoint)?;
        let reference = if progress.step > stages.sft_steps {
            Some(read_checkpoint(&paths.reference)?.0)
        } else {
            None
        };
        truncate_metrics(&paths.metrics, progress.step)?;
        log::info!("resuming at step {}", progress.step);
        TrainState {
            theta,
            reference,
            step: progress.step,
        }
    } else {
        std::fs::write(&paths.metrics, "").map_err(|e| Error::io(&paths.metrics, e))?;
        TrainState::new(initial_params(&cfg)?)
    };
    if state.theta.dims() != cfg.dims() {
        return Err(invalid!("checkpoint dims {:?} do not match config {:?}", state.theta.dims(), cfg.dims()));
    }

    let encoder = EncoderParams::from_seed(cfg.encoder_seed, cfg.embed_dim, cfg.feature_dim);
    let engine = Engine::new(cfg.sp_degree, &encoder, cfg.cache)?;
    let mut metrics_file = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&paths.metrics)
        .map_err(|e| Error::io(&paths.metrics, e))?;
    let save = |state: &TrainState| -> Result<()> {
        write_checkpoint(&paths.checkpoint, &state.theta, cfg.feature_dim)?;
        if let Some(r) = &state.reference {
            write_checkpoint(&paths.reference, r, cfg.feature_dim)?;
        }
        let tmp = paths.progress.with_extension("tmp");
        let body = serde_json::to_string(&Progress { step: state.step }).expect("progress serializes");
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &paths.progress).map_err(|e| Error::io(&paths.progress, e))
    };

    let run_stages = match args.stop_after {
        Some(limit) if limit < stages.total() => crate::grpo::StageSteps {
            sft_steps: stages.sft_steps.min(limit),
            rl_steps: limit.saturating_sub(stages.sft_steps),
        },
        _ => stages,
    };
    let mut sink = |m: &StepMetrics, s: &TrainState| -> Result<()> {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(metrics_file, "{line}").map_err(|e| Error::io(&paths.metrics, e))?;
        if s.step % cfg.checkpoint_every == 0 {
            save(s)?;
        }
        Ok(())
    };
    let outcome = train_loop(&dataset, &engine, &cfg.loop_config(), run_stages, state, &mut sink)?;
    save(&outcome.state)?;
    let finished = outcome.state.step == stages.total();
    if finished {
        write_checkpoint(&paths.final_checkpoint, &outcome.state.theta, cfg.feature_dim)?;
    }
    let stats = engine.stats();
    let last = outcome.history.last().cloned();
    match &last {
        Some(m) => writeln!(
            out,
            "{} at step {}/{}: stage {} loss {:.4} reward {:.4} format {:.4} accuracy {:.4} kl {:.5}; encoder invocations {}",
            if finished { "done" } else { "stopped" },
            outcome.state.step,
            stages.total(),
            m.stage,
            m.loss,
            m.mean_reward,
            m.mean_format,
            m.mean_accuracy,
            m.mean_kl,
            stats.encoder_invocations
        ),
        None => writeln!(out, "nothing to do: already at step {}/{}", outcome.state.step, stages.total()),
    }
    .map_err(out_err)?;
    Ok(TrainSummary {
        steps_completed: outcome.state.step,
        last,
        encoder_invocations: stats.encoder_invocations,
    })
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub data: PathBuf,
    /// Required unless `transcripts` is given.
    pub checkpoint: Option<PathBuf>,
    pub transcripts: Option<PathBuf>,
    pub greedy: bool,
    pub encoder_seed: u64,
    pub seed: u64,
    pub max_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Tally {
    pub n: usize,
    pub accuracy: f64,
    pub format: f64,
}

impl Tally {
    fn add(&mut self, r: &RewardBreakdown) {
        self.n += 1;
        self.accuracy += r.accuracy;
        self.format += r.format;
    }

    fn finish(mut self) -> Self {
        if self.n > 0 {
            self.accuracy /= self.n as f64;
            self.format /= self.n as f64;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    pub overall: Tally,
    pub per_family: BTreeMap<String, Tally>,
    pub per_difficulty: BTreeMap<String, Tally>,
}

#[derive(Debug, Deserialize)]
struct Transcript {
    id: String,
    text: String,
}

fn read_transcripts(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: Transcript = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.insert(t.id, t.text);
    }
    Ok(out)
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let samples = read_dataset(&args.data)?;
    let rewards = RewardConfig::default();
    let breakdowns: Vec<RewardBreakdown> = if let Some(path) = &args.transcripts {
        let transcripts = read_transcripts(path)?;
        samples
            .iter()
            .map(|s| {
                let text = transcripts
                    .get(&s.id)
                    .ok_or_else(|| Error::State(format!("no transcript for sample {}", s.id)))?;
                score_text(text, s.gold_answer, &rewards)
            })
            .collect::<Result<_>>()?
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| invalid!("eval needs --checkpoint or --transcripts"))?;
        let (params, feature_dim) = read_checkpoint(path)?;
        check_compat(&params, feature_dim, &samples)?;
        let vocab = Vocab::new(params.dims().vocab)?;
        let encoder = EncoderParams::from_seed(args.encoder_seed, params.dims().embed, feature_dim);
        samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let video = s.video.generate()?;
                let seq = build_sequence(serial_encode(&encoder, &video)?.into(), s)?;
                let tokens = if args.greedy {
                    greedy_decode(&params, &seq, args.max_len)?
                } else {
                    let mut rng = rng::stream(args.seed, &[0xe7a1, i as u64]);
                    sample_rollout(&params, &seq, 1.0, args.max_len, &mut rng)?.tokens
                };
                score(&tokens, &vocab, s.gold_answer, &rewards)
            })
            .collect::<Result<_>>()?
    };

    let mut report = EvalReport::default();
    for (s, r) in samples.iter().zip(&breakdowns) {
        report.overall.add(r);
        report.per_family.entry(s.family.to_string()).or_default().add(r);
        report.per_difficulty.entry(s.difficulty.to_string()).or_default().add(r);
    }
    report.overall = report.overall.finish();
    report.per_family.values_mut().for_each(|t| *t = t.finish());
    report.per_difficulty.values_mut().for_each(|t| *t = t.finish());

    let line = |out: &mut dyn Write, name: &str, t: &Tally| {
        writeln!(out, "{name:<16} n={:<5} accuracy {:.4} format {:.4}", t.n, t.accuracy, t.format).map_err(out_err)
    };
    line(out, "overall", &report.overall)?;
    for (k, t) in &report.per_family {
        line(out, &format!("family {k}"), t)?;
    }
    for (k, t) in &report.per_difficulty {
        line(out, &format!("difficulty {k}"), t)?;
    }
    Ok(report)
}

pub fn cmd_bench(cfg: &BenchConfig, jsonl: Option<&Path>, out: &mut dyn Write) -> Result<Vec<crate::mrsp::BenchRecord>> {
    let records = bench(cfg)?;
    if let Some(path) = jsonl {
        let mut body = String::new();
        for r in &records {
            body.push_str(&serde_json::to_string(r).expect("bench record serializes"));
            body.push('\n');
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    write!(out, "{}", render_table(&records)).map_err(out_err)?;
    Ok(records)
}
