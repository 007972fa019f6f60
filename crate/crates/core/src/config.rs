//! Run configuration: flat `key = value` lines, `#` starts a comment.
//!
//! Every key has a default, so an empty file is a valid config. Unknown keys and
//! unparsable values are parse errors carrying the line number.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::grpo::{GrpoConfig, KlEstimator, LoopConfig, StageSteps};
use crate::mmseq::{TaskFamily, DEFAULT_EMBED_DIM, DEFAULT_FEATURE_DIM, DEFAULT_VOCAB};
use crate::policy::{PolicyDims, DEFAULT_HIDDEN};
use crate::rewards::RewardConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grpo: GrpoConfig,
    pub rewards: RewardConfig,
    /// Training dataset; when unset, `n_samples` tasks are generated from `data_seed`.
    pub data: Option<PathBuf>,
    pub n_samples: usize,
    pub frames: usize,
    pub family: TaskFamily,
    /// Starting checkpoint; when unset, θ is drawn uniformly in `[-init_scale, init_scale]`.
    pub init_checkpoint: Option<PathBuf>,
    pub init_scale: f64,
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub sp_degree: usize,
    pub cache: bool,
    pub sft_steps: usize,
    pub rl_steps: usize,
    pub batch_size: usize,
    pub sft_learning_rate: f64,
    pub checkpoint_every: usize,
    pub data_seed: u64,
    pub encoder_seed: u64,
    pub train_seed: u64,
    pub out_dir: PathBuf,
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grpo: GrpoConfig::default(),
            rewards: RewardConfig::default(),
            data: None,
            n_samples: 200,
            frames: 32,
            family: TaskFamily::ArgmaxChannel,
            init_checkpoint: None,
            init_scale: 0.1,
            vocab: DEFAULT_VOCAB,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN,
            feature_dim: DEFAULT_FEATURE_DIM,
            sp_degree: 2,
            cache: true,
            sft_steps: 100,
            rl_steps: 200,
            batch_size: 8,
            sft_learning_rate: 1e-2,
            checkpoint_every: 50,
            data_seed: 0,
            encoder_seed: 0,
            train_seed: 0,
            out_dir: PathBuf::from("run"),
            record_timing: false,
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn kl_name(k: KlEstimator) -> &'static str {
    match k {
        KlEstimator::Exact => "exact",
        KlEstimator::K3 => "k3",
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl RunConfig {
    pub fn dims(&self) -> PolicyDims {
        PolicyDims {
            vocab: self.vocab,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
        }
    }

    pub fn stages(&self) -> StageSteps {
        StageSteps {
            sft_steps: self.sft_steps,
            rl_steps: self.rl_steps,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            grpo: self.grpo,
            rewards: self.rewards,
            batch_size: self.batch_size,
            sft_learning_rate: self.sft_learning_rate,
            seed: self.train_seed,
            record_timing: self.record_timing,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.rewards.validate()?;
        crate::mmseq::Vocab::new(self.vocab)?;
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(invalid!("embed_dim and hidden_dim must be positive"));
        }
        if self.feature_dim < 4 || self.frames == 0 {
            return Err(invalid!("need feature_dim >= 4 and frames >= 1"));
        }
        if self.sp_degree == 0 || self.batch_size == 0 || self.checkpoint_every == 0 {
            return Err(invalid!("sp_degree, batch_size and checkpoint_every must be positive"));
        }
        if self.data.is_none() && self.n_samples == 0 {
            return Err(invalid!("no dataset path and n_samples = 0"));
        }
        if !(self.init_scale >= 0.0 && self.sft_learning_rate.is_finite()) {
            return Err(invalid!("init_scale must be non-negative and sft_learning_rate finite"));
        }
        Ok(())
    }

    /// Key/value pairs in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let g = &self.grpo;
        vec![
            ("group_size", g.group_size.to_string()),
            ("clip_eps", g.clip_eps.to_string()),
            ("kl_beta", g.kl_beta.to_string()),
            ("kl_estimator", kl_name(g.kl_estimator).to_string()),
            ("learning_rate", g.learning_rate.to_string()),
            ("max_len", g.max_len.to_string()),
            ("temperature", g.temperature.to_string()),
            ("std_floor", g.std_floor.to_string()),
            ("w_acc", self.rewards.w_acc.to_string()),
            ("w_fmt", self.rewards.w_fmt.to_string()),
            ("data", opt_path(&self.data)),
            ("n_samples", self.n_samples.to_string()),
            ("frames", self.frames.to_string()),
            ("family", self.family.to_string()),
            ("init_checkpoint", opt_path(&self.init_checkpoint)),
            ("init_scale", self.init_scale.to_string()),
            ("vocab", self.vocab.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("sp_degree", self.sp_degree.to_string()),
            ("cache", self.cache.to_string()),
            ("sft_steps", self.sft_steps.to_string()),
            ("rl_steps", self.rl_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("sft_learning_rate", self.sft_learning_rate.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("record_timing", self.record_timing.to_string()),
        ]
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "group_size" => self.grpo.group_size = parse(v)?,
            "clip_eps" => self.grpo.clip_eps = parse(v)?,
            "kl_beta" => self.grpo.kl_beta = parse(v)?,
            "kl_estimator" => {
                self.grpo.kl_estimator = match v {
                    "exact" => KlEstimator::Exact,
                    "k3" => KlEstimator::K3,
                    _ => return Err(format!("kl_estimator must be exact or k3, got {v:?}")),
                }
            }
            "learning_rate" => self.grpo.learning_rate = parse(v)?,
            "max_len" => self.grpo.max_len = parse(v)?,
            "temperature" => self.grpo.temperature = parse(v)?,
            "std_floor" => self.grpo.std_floor = parse(v)?,
            "w_acc" => self.rewards.w_acc = parse(v)?,
            "w_fmt" => self.rewards.w_fmt = parse(v)?,
            "data" => self.data = path(v),
            "n_samples" => self.n_samples = parse(v)?,
            "frames" => self.frames = parse(v)?,
            "family" => self.family = parse(v)?,
            "init_checkpoint" => self.init_checkpoint = path(v),
            "init_scale" => self.init_scale = parse(v)?,
            "vocab" => self.vocab = parse(v)?,
            "embed_dim" => self.embed_dim = parse(v)?,
            "hidden_dim" => self.hidden_dim = parse(v)?,
            "feature_dim" => self.feature_dim = parse(v)?,
            "sp_degree" => self.sp_degree = parse(v)?,
            "cache" => self.cache = parse(v)?,
            "sft_steps" => self.sft_steps = parse(v)?,
            "rl_steps" => self.rl_steps = parse(v)?,
            "batch_size" => self.batch_size = parse(v)?,
            "sft_learning_rate" => self.sft_learning_rate = parse(v)?,
            "checkpoint_every" => self.checkpoint_every = parse(v)?,
            "data_seed" => self.data_seed = parse(v)?,
            "encoder_seed" => self.encoder_seed = parse(v)?,
            "train_seed" => self.train_seed = parse(v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "record_timing" => self.record_timing = parse(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Parses config text; `origin` only labels errors.
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
