//! Desk-scale long-video reinforcement learning.
//!
//! The crate bundles a synthetic video question-answering task generator, a tiny
//! differentiable autoregressive policy over a frozen frame encoder, rule-based
//! format/accuracy rewards, GRPO training with an exact analytic gradient, a
//! test-scaling difficulty filter, and a sequence-parallel rollout engine that
//! shards frame encoding and prefilling across worker threads with an
//! exactly-once embedding cache.

pub mod commands;
pub mod config;
pub mod error;
pub mod filter;
pub mod grpo;
pub mod mmseq;
pub mod mrsp;
pub mod policy;
pub mod rewards;
mod rng;

pub use error::{Error, Result};
