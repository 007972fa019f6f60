//! Rule-based format and accuracy rewards.
//!
//! A response is well formed iff it is exactly
//! `<think> content* </think> <answer> LETTER </answer> [EOS]`, where content is
//! any token other than the tags, EOS and PAD.
//! Accuracy is only credited through a successful parse.

use std::ops::Range;
use std::sync::LazyLock;

use regex::Regex;

use crate::error::{invalid, Result};
use crate::mmseq::{TokenId, Vocab, ANS_CLOSE, ANS_OPEN, EOS, FIRST_CONTENT, THINK_CLOSE, THINK_OPEN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub w_acc: f64,
    pub w_fmt: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_acc: 1.0,
            w_fmt: 0.5,
        }
    }
}

impl RewardConfig {
    pub fn new(w_acc: f64, w_fmt: f64) -> Result<Self> {
        let cfg = RewardConfig { w_acc, w_fmt };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w_acc >= 0.0 && self.w_fmt >= 0.0) {
            return Err(invalid!("reward weights must be non-negative"));
        }
        if self.w_acc == 0.0 && self.w_fmt == 0.0 {
            return Err(invalid!("reward weights cannot both be zero"));
        }
        Ok(())
    }

    pub fn max_total(&self) -> f64 {
        self.w_acc + self.w_fmt
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub total: f64,
    pub extracted_answer: Option<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedResponse {
    /// Index range of the reasoning content inside the token list.
    pub think_span: Range<usize>,
    pub answer: TokenId,
}

/// Recognizes the think/answer grammar over tokens.
pub fn parse_format(tokens: &[TokenId], vocab: &Vocab) -> Option<ParsedResponse> {
    let is_content = |t: TokenId| (Vocab::is_letter(t) || t >= FIRST_CONTENT) && vocab.contains(t);
    let mut rest = tokens;
    let take = |rest: &mut &[TokenId], want: TokenId| -> Option<()> {
        let (&first, tail) = rest.split_first()?;
        (first == want).then(|| *rest = tail)
    };

    take(&mut rest, THINK_OPEN)?;
    let content_len = rest.iter().take_while(|&&t| is_content(t)).count();
    rest = &rest[content_len..];
    take(&mut rest, THINK_CLOSE)?;
    take(&mut rest, ANS_OPEN)?;
    let (&answer, tail) = rest.split_first()?;
    if !Vocab::is_letter(answer) {
        return None;
    }
    rest = tail;
    take(&mut rest, ANS_CLOSE)?;
    match rest {
        [] | [EOS] => Some(ParsedResponse {
            think_span: 1..1 + content_len,
            answer,
        }),
        _ => None,
    }
}

static TEXT_GRAMMAR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?s)^\s*<think>(.*?)</think>\s*<answer>\s*([A-D])\s*</answer>\s*(?:<eos>)?\s*$").unwrap()
});

const TEXT_TAGS: [&str; 6] = ["<think>", "</think>", "<answer>", "</answer>", "<eos>", "<pad>"];

/// String-level variant of [`parse_format`] for rendered transcripts.
///
/// Returns the reasoning text and the answer letter token.
pub fn parse_format_text(text: &str) -> Option<(String, TokenId)> {
    let caps = TEXT_GRAMMAR.captures(text)?;
    let think = caps.get(1)?.as_str();
    if TEXT_TAGS.iter().any(|tag| think.contains(tag)) {
        return None;
    }
    let letter = caps.get(2)?.as_str().as_bytes()[0] - b'A';
    Some((think.trim().to_string(), Vocab::letter(letter as usize)))
}

fn breakdown(answer: Option<TokenId>, gold_answer: TokenId, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    if !Vocab::is_letter(gold_answer) {
        return Err(invalid!("gold answer {gold_answer} is not an answer letter"));
    }
    let format = if answer.is_some() { 1.0 } else { 0.0 };
    let accuracy = if answer == Some(gold_answer) { 1.0 } else { 0.0 };
    Ok(RewardBreakdown {
        format,
        accuracy,
        total: cfg.w_acc * accuracy + cfg.w_fmt * format,
        extracted_answer: answer,
    })
}

pub fn score(tokens: &[TokenId], vocab: &Vocab, gold_answer: TokenId, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    breakdown(parse_format(tokens, vocab).map(|p| p.answer), gold_answer, cfg)
}

pub fn score_text(text: &str, gold_answer: TokenId, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    breakdown(parse_format_text(text).map(|(_, a)| a), gold_answer, cfg)
}
