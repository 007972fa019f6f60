//! Python bindings: dataset generation, rewards, advantages, sharding, the
//! MR-SP engine and the training command.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mrsp_core::commands::{cmd_train, generate_samples, TrainArgs};
use mrsp_core::config::RunConfig;
use mrsp_core::mmseq::{self, TaskFamily, TokenId, Vocab};
use mrsp_core::policy::EncoderParams;
use mrsp_core::rewards::{self, RewardBreakdown, RewardConfig};
use mrsp_core::{grpo, mrsp, Error};

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } => PyValueError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        Error::State(_) | Error::NonFinite(_) => PyRuntimeError::new_err(msg),
    }
}

fn breakdown(r: RewardBreakdown) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("format", r.format),
        ("accuracy", r.accuracy),
        ("total", r.total),
        ("extracted_answer", r.extracted_answer.map_or(-1.0, f64::from)),
    ])
}

/// One synthetic video question.
#[pyclass(frozen, from_py_object, name = "Sample")]
#[derive(Clone)]
struct PySample {
    inner: mmseq::Sample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn video_id(&self) -> String {
        self.inner.video_id()
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family.to_string()
    }

    #[getter]
    fn question_tokens(&self) -> Vec<TokenId> {
        self.inner.question_tokens.clone()
    }

    #[getter]
    fn gold_answer(&self) -> TokenId {
        self.inner.gold_answer
    }

    #[getter]
    fn difficulty(&self) -> String {
        self.inner.difficulty.to_string()
    }

    /// Canonical well-formed response with the gold answer.
    fn sft_target(&self) -> Vec<TokenId> {
        grpo::sft_target(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Sample(id={:?}, family={}, gold={})", self.inner.id, self.inner.family, self.inner.gold_answer)
    }
}

#[pyfunction]
#[pyo3(signature = (n, frames=32, feature_dim=32, family=None, seed=0))]
fn gen_samples(n: usize, frames: usize, feature_dim: usize, family: Option<&str>, seed: u64) -> PyResult<Vec<PySample>> {
    let family = family.map(str::parse::<TaskFamily>).transpose().map_err(to_py)?;
    let samples = generate_samples(n, frames, feature_dim, family, seed).map_err(to_py)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
fn read_dataset(path: PathBuf) -> PyResult<Vec<PySample>> {
    let samples = mmseq::read_dataset(&path).map_err(to_py)?;
    Ok(samples.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyfunction]
fn write_dataset(path: PathBuf, samples: Vec<PySample>) -> PyResult<()> {
    let samples: Vec<_> = samples.into_iter().map(|s| s.inner).collect();
    mmseq::write_dataset(&path, &samples).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (tokens, vocab=None))]
fn render(tokens: Vec<TokenId>, vocab: Option<usize>) -> PyResult<String> {
    let vocab = Vocab::new(vocab.unwrap_or(mmseq::DEFAULT_VOCAB)).map_err(to_py)?;
    Ok(vocab.render_tokens(&tokens))
}

#[pyfunction]
#[pyo3(signature = (tokens, gold, w_acc=1.0, w_fmt=0.5, vocab=32))]
fn score(tokens: Vec<TokenId>, gold: TokenId, w_acc: f64, w_fmt: f64, vocab: usize) -> PyResult<HashMap<&'static str, f64>> {
    let cfg = RewardConfig::new(w_acc, w_fmt).map_err(to_py)?;
    let vocab = Vocab::new(vocab).map_err(to_py)?;
    rewards::score(&tokens, &vocab, gold, &cfg).map(breakdown).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (text, gold, w_acc=1.0, w_fmt=0.5))]
fn score_text(text: &str, gold: TokenId, w_acc: f64, w_fmt: f64) -> PyResult<HashMap<&'static str, f64>> {
    let cfg = RewardConfig::new(w_acc, w_fmt).map_err(to_py)?;
    rewards::score_text(text, gold, &cfg).map(breakdown).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (rewards, std_floor=1e-8))]
fn compute_advantages(rewards: Vec<f64>, std_floor: f64) -> PyResult<Vec<f64>> {
    grpo::compute_advantages(&rewards, std_floor).map(|a| a.values).map_err(to_py)
}

#[pyfunction]
fn plan_shards(n_items: usize, sp_degree: usize) -> PyResult<Vec<(usize, usize)>> {
    let plan = mrsp::plan_shards(n_items, sp_degree).map_err(to_py)?;
    Ok(plan.ranges().iter().map(|r| (r.start, r.end)).collect())
}

/// Sharded encoder group with an optional embedding cache.
#[pyclass(frozen, name = "Engine")]
struct PyEngine {
    inner: mrsp::Engine,
    encoder: EncoderParams,
}

#[pymethods]
impl PyEngine {
    #[new]
    #[pyo3(signature = (sp_degree, embed_dim=16, feature_dim=32, encoder_seed=0, cache=true))]
    fn new(sp_degree: usize, embed_dim: usize, feature_dim: usize, encoder_seed: u64, cache: bool) -> PyResult<Self> {
        let encoder = EncoderParams::from_seed(encoder_seed, embed_dim, feature_dim);
        let inner = mrsp::Engine::new(sp_degree, &encoder, cache).map_err(to_py)?;
        Ok(PyEngine { inner, encoder })
    }

    #[getter]
    fn sp_degree(&self) -> usize {
        self.inner.sp_degree()
    }

    /// Gathered frame embeddings for the video regenerated from `(seed, frames)`.
    fn embeddings(&self, py: Python<'_>, video_seed: u64, frames: usize) -> PyResult<Vec<Vec<f64>>> {
        let video = mmseq::gen_video(video_seed, frames, self.encoder.feature_dim()).map_err(to_py)?;
        let emb = py.detach(|| self.inner.embeddings(&video)).map_err(to_py)?;
        Ok(emb.as_ref().clone())
    }

    /// Single-threaded encoding of the same video, for comparison.
    fn serial_embeddings(&self, video_seed: u64, frames: usize) -> PyResult<Vec<Vec<f64>>> {
        let video = mmseq::gen_video(video_seed, frames, self.encoder.feature_dim()).map_err(to_py)?;
        mrsp::serial_encode(&self.encoder, &video).map_err(to_py)
    }

    fn stats(&self) -> HashMap<&'static str, u64> {
        let s = self.inner.stats();
        let mut out = HashMap::from([
            ("encoder_invocations", s.encoder_invocations),
            ("gather_bytes", s.gather_bytes),
            ("pad_reads", s.pad_reads),
        ]);
        if let Some(c) = self.inner.cache_stats() {
            out.insert("cache_hits", c.hits);
            out.insert("cache_misses", c.misses);
        }
        out
    }
}

/// Parses a config file and returns it re-serialized with defaults filled in.
#[pyfunction]
fn resolve_config(path: PathBuf) -> PyResult<String> {
    let cfg = RunConfig::load(&path).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg.to_text())
}

/// Runs the `train` command; returns its report line.
#[pyfunction]
#[pyo3(signature = (config, dry_run=false, resume=false))]
fn train(py: Python<'_>, config: PathBuf, dry_run: bool, resume: bool) -> PyResult<String> {
    let args = TrainArgs {
        config,
        dry_run,
        resume,
        stop_after: None,
    };
    let mut out = Vec::new();
    py.detach(|| cmd_train(&args, &mut out)).map_err(to_py)?;
    Ok(String::from_utf8_lossy(&out).into_owned())
}

#[pymodule]
fn mrsp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PyEngine>()?;
    m.add_function(wrap_pyfunction!(gen_samples, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(score_text, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(plan_shards, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
