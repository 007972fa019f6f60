//! Multimodal sequences and the synthetic video-QA task generator.
//!
//! Videos are never stored: a [`VideoSpec`] (seed, frame count, feature dim)
//! regenerates the exact same frames on any machine, so dataset files only
//! carry the video spec plus the question and its label.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const EOS: TokenId = 1;
pub const THINK_OPEN: TokenId = 2;
pub const THINK_CLOSE: TokenId = 3;
pub const ANS_OPEN: TokenId = 4;
pub const ANS_CLOSE: TokenId = 5;
pub const LETTER_A: TokenId = 6;
pub const NUM_LETTERS: usize = 4;
/// First id available for ordinary content tokens.
pub const FIRST_CONTENT: TokenId = LETTER_A + NUM_LETTERS as TokenId;

pub const DEFAULT_VOCAB: usize = 32;
pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_FEATURE_DIM: usize = 32;
const MIN_VOCAB: usize = 16;
const CHANNEL_GROUPS: usize = 4;

/// Token alphabet with the fixed reserved ids above.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            size: DEFAULT_VOCAB,
        }
    }
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(invalid!("vocab size {size} below minimum {MIN_VOCAB}"));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn letter(index: usize) -> TokenId {
        assert!(index < NUM_LETTERS, "answer letter index {index} out of range");
        LETTER_A + index as TokenId
    }

    pub fn is_letter(token: TokenId) -> bool {
        (LETTER_A..FIRST_CONTENT).contains(&token)
    }

    pub fn letter_index(token: TokenId) -> Option<usize> {
        Vocab::is_letter(token).then(|| (token - LETTER_A) as usize)
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    /// Literal rendering of a single token.
    pub fn render(&self, token: TokenId) -> String {
        match token {
            PAD => "<pad>".into(),
            EOS => "<eos>".into(),
            THINK_OPEN => "<think>".into(),
            THINK_CLOSE => "</think>".into(),
            ANS_OPEN => "<answer>".into(),
            ANS_CLOSE => "</answer>".into(),
            t if Vocab::is_letter(t) => ((b'A' + (t - LETTER_A) as u8) as char).to_string(),
            t => format!(" w{t} "),
        }
    }

    /// Detokenizes a transcript. Tags and letters render bare; content tokens
    /// render as space-padded words.
    pub fn render_tokens(&self, tokens: &[TokenId]) -> String {
        tokens.iter().map(|&t| self.render(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub features: Vec<f64>,
}

/// Enough to regenerate a video bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VideoSpec {
    pub seed: u64,
    pub num_frames: usize,
    pub feature_dim: usize,
}

impl VideoSpec {
    pub fn id(&self) -> String {
        format!("v{}-f{}-p{}", self.seed, self.num_frames, self.feature_dim)
    }

    pub fn generate(&self) -> Result<Video> {
        gen_video(self.seed, self.num_frames, self.feature_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    pub frames: Vec<Frame>,
    pub seed: u64,
}

impl Video {
    pub fn feature_dim(&self) -> usize {
        self.frames.first().map_or(0, |f| f.features.len())
    }

    pub fn spec(&self) -> VideoSpec {
        VideoSpec {
            seed: self.seed,
            num_frames: self.frames.len(),
            feature_dim: self.feature_dim(),
        }
    }
}

/// Generates a synthetic video from a seed.
///
/// Channels are split into four contiguous groups. One group (chosen per video)
/// sits at a high level, the others at lower random levels, and every entry gets
/// uniform noise whose amplitude differs between the first and second half of the
/// video. All entries lie in [-1, 1].
pub fn gen_video(seed: u64, num_frames: usize, feature_dim: usize) -> Result<Video> {
    if num_frames == 0 {
        return Err(invalid!("video needs at least one frame"));
    }
    if feature_dim < 4 {
        return Err(invalid!("feature dim {feature_dim} below minimum 4"));
    }
    let mut rng = rng::stream(seed, &[0x7669_6465_6f]);
    let dominant = rng.random_range(0..CHANNEL_GROUPS);
    let levels: Vec<f64> = (0..CHANNEL_GROUPS)
        .map(|g| {
            if g == dominant {
                0.5
            } else {
                rng.random_range(-0.5..0.1)
            }
        })
        .collect();
    let amp_first: f64 = rng.random_range(0.1..0.5);
    let amp_second: f64 = rng.random_range(0.1..0.5);
    let half = num_frames / 2;
    let frames = (0..num_frames)
        .map(|f| {
            let amp = if f < half { amp_first } else { amp_second };
            let features = (0..feature_dim)
                .map(|j| {
                    let level = levels[j * CHANNEL_GROUPS / feature_dim];
                    let noise: f64 = rng.random_range(-1.0..1.0);
                    (level + amp * noise).clamp(-1.0, 1.0)
                })
                .collect();
            Frame { features }
        })
        .collect();
    let spec = VideoSpec {
        seed,
        num_frames,
        feature_dim,
    };
    Ok(Video {
        id: spec.id(),
        frames,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskFamily {
    /// Which channel group has the largest mean after mean-pooling frames.
    ArgmaxChannel,
    /// Whether the first half of the video carries more energy than the second.
    TemporalHalf,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 2] = [TaskFamily::ArgmaxChannel, TaskFamily::TemporalHalf];

    pub fn question_template(self) -> Vec<TokenId> {
        match self {
            TaskFamily::ArgmaxChannel => vec![FIRST_CONTENT, FIRST_CONTENT + 1, FIRST_CONTENT + 2],
            TaskFamily::TemporalHalf => vec![FIRST_CONTENT, FIRST_CONTENT + 3, FIRST_CONTENT + 2],
        }
    }

    /// Fixed reasoning span used by the supervised warm-up annotator.
    pub fn reasoning_template(self) -> Vec<TokenId> {
        match self {
            TaskFamily::ArgmaxChannel => vec![FIRST_CONTENT + 4, FIRST_CONTENT + 5],
            TaskFamily::TemporalHalf => vec![FIRST_CONTENT + 5, FIRST_CONTENT + 4],
        }
    }

    pub fn num_choices(self) -> usize {
        match self {
            TaskFamily::ArgmaxChannel => 4,
            TaskFamily::TemporalHalf => 2,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskFamily::ArgmaxChannel => f.write_str("ArgmaxChannel"),
            TaskFamily::TemporalHalf => f.write_str("TemporalHalf"),
        }
    }
}

impl std::str::FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ArgmaxChannel" | "argmax-channel" | "argmax" => Ok(TaskFamily::ArgmaxChannel),
            "TemporalHalf" | "temporal-half" | "temporal" => Ok(TaskFamily::TemporalHalf),
            other => Err(invalid!("unknown task family {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum Difficulty {
    #[default]
    Unlabeled,
    Easy,
    Medium,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unlabeled" => Ok(Difficulty::Unlabeled),
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(invalid!("unknown difficulty {other:?}")),
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One question about one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub video: VideoSpec,
    pub family: TaskFamily,
    pub question_tokens: Vec<TokenId>,
    pub choices: Option<Vec<TokenId>>,
    pub gold_answer: TokenId,
    pub difficulty: Difficulty,
}

impl Sample {
    pub fn video_id(&self) -> String {
        self.video.id()
    }

    pub fn validate(&self) -> Result<()> {
        if self.question_tokens.is_empty() {
            return Err(invalid!("sample {}: empty question", self.id));
        }
        if !Vocab::is_letter(self.gold_answer) {
            return Err(invalid!("sample {}: gold answer {} is not a letter", self.id, self.gold_answer));
        }
        if let Some(choices) = &self.choices {
            if !choices.contains(&self.gold_answer) {
                return Err(invalid!("sample {}: gold answer not among choices", self.id));
            }
        }
        Ok(())
    }
}

/// Mean-pooled feature vector over frames.
fn pooled_features(video: &Video) -> Vec<f64> {
    let p = video.feature_dim();
    let mut pooled = vec![0.0; p];
    for frame in &video.frames {
        for (acc, x) in pooled.iter_mut().zip(&frame.features) {
            *acc += x;
        }
    }
    let n = video.frames.len() as f64;
    pooled.iter_mut().for_each(|x| *x /= n);
    pooled
}

fn energy(frames: &[Frame]) -> f64 {
    frames
        .iter()
        .flat_map(|f| f.features.iter())
        .map(|x| x * x)
        .sum()
}

/// Computes the analytic label for a video.
pub fn gold_label(video: &Video, family: TaskFamily) -> Result<TokenId> {
    if video.frames.is_empty() {
        return Err(invalid!("video {} has no frames", video.id));
    }
    match family {
        TaskFamily::ArgmaxChannel => {
            let p = video.feature_dim();
            if p % CHANNEL_GROUPS != 0 {
                return Err(invalid!("feature dim {p} not divisible by {CHANNEL_GROUPS}"));
            }
            let pooled = pooled_features(video);
            let width = p / CHANNEL_GROUPS;
            let means: Vec<f64> = pooled
                .chunks(width)
                .map(|g| g.iter().sum::<f64>() / width as f64)
                .collect();
            // Strict comparison keeps the lowest letter on ties.
            let mut best = 0;
            for (g, &m) in means.iter().enumerate() {
                if m > means[best] {
                    best = g;
                }
            }
            Ok(Vocab::letter(best))
        }
        TaskFamily::TemporalHalf => {
            let half = video.frames.len() / 2;
            let first = energy(&video.frames[..half]);
            let second = energy(&video.frames[half..]);
            Ok(Vocab::letter(if first > second { 0 } else { 1 }))
        }
    }
}

/// Builds a labelled question for a video.
pub fn gen_task(video: &Video, family: TaskFamily) -> Result<Sample> {
    let gold_answer = gold_label(video, family)?;
    Ok(Sample {
        id: format!("{}:{}", video.id, family),
        video: video.spec(),
        family,
        question_tokens: family.question_template(),
        choices: Some((0..family.num_choices()).map(Vocab::letter).collect()),
        gold_answer,
        difficulty: Difficulty::Unlabeled,
    })
}

/// Gathered frame embeddings, shared between rollouts.
pub type Embeddings = Arc<Vec<Vec<f64>>>;

/// Prompt context: all frame embeddings followed by the question tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSequence {
    pub frame_embeddings: Embeddings,
    pub text_tokens: Vec<TokenId>,
}

impl MultimodalSequence {
    pub fn total_len(&self) -> usize {
        self.frame_embeddings.len() + self.text_tokens.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.frame_embeddings.first().map_or(0, Vec::len)
    }

    pub fn is_frame_position(&self, pos: usize) -> bool {
        pos < self.frame_embeddings.len()
    }
}

pub fn build_sequence(video_embeddings: Embeddings, sample: &Sample) -> Result<MultimodalSequence> {
    let Some(first) = video_embeddings.first() else {
        return Err(invalid!("sequence for {} has no frame embeddings", sample.id));
    };
    let d = first.len();
    if let Some(bad) = video_embeddings.iter().position(|e| e.len() != d) {
        return Err(invalid!("embedding {bad} has dimension {} (expected {d})", video_embeddings[bad].len()));
    }
    if sample.question_tokens.is_empty() {
        return Err(invalid!("sample {} has no question tokens", sample.id));
    }
    Ok(MultimodalSequence {
        frame_embeddings: video_embeddings,
        text_tokens: sample.question_tokens.clone(),
    })
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub video_seed: u64,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub family: TaskFamily,
    pub question_tokens: Vec<TokenId>,
    pub choices: Option<Vec<TokenId>>,
    pub gold_answer: TokenId,
    pub difficulty: Difficulty,
}

impl From<&Sample> for SampleRecord {
    fn from(s: &Sample) -> Self {
        SampleRecord {
            id: s.id.clone(),
            video_seed: s.video.seed,
            num_frames: s.video.num_frames,
            feature_dim: s.video.feature_dim,
            family: s.family,
            question_tokens: s.question_tokens.clone(),
            choices: s.choices.clone(),
            gold_answer: s.gold_answer,
            difficulty: s.difficulty,
        }
    }
}

impl TryFrom<SampleRecord> for Sample {
    type Error = Error;

    fn try_from(r: SampleRecord) -> Result<Self> {
        let sample = Sample {
            id: r.id,
            video: VideoSpec {
                seed: r.video_seed,
                num_frames: r.num_frames,
                feature_dim: r.feature_dim,
            },
            family: r.family,
            question_tokens: r.question_tokens,
            choices: r.choices,
            gold_answer: r.gold_answer,
            difficulty: r.difficulty,
        };
        sample.validate()?;
        Ok(sample)
    }
}

pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(&SampleRecord::from(s)).expect("record serializes"));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: SampleRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        samples.push(Sample::try_from(record).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video_from(frames: Vec<Vec<f64>>) -> Video {
        Video {
            id: "manual".into(),
            frames: frames.into_iter().map(|features| Frame { features }).collect(),
            seed: 0,
        }
    }

    #[test]
    fn gen_video_is_deterministic() {
        let a = gen_video(7, 1, 4).unwrap();
        let b = gen_video(7, 1, 4).unwrap();
        assert_eq!(a.frames.len(), 1);
        assert_eq!(a.frames[0].features.len(), 4);
        let bits = |v: &Video| -> Vec<u64> { v.frames[0].features.iter().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn gen_video_depends_on_seed() {
        let a = gen_video(7, 8, 32).unwrap();
        let b = gen_video(8, 8, 32).unwrap();
        assert_ne!(a.frames, b.frames);
    }

    #[test]
    fn gen_video_rejects_bad_shapes() {
        assert!(matches!(gen_video(7, 0, 32), Err(Error::InvalidArgument(_))));
        assert!(matches!(gen_video(7, 4, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gen_video_entries_bounded() {
        let v = gen_video(11, 64, 32).unwrap();
        assert!(v.frames.iter().flat_map(|f| &f.features).all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn argmax_channel_picks_group() {
        let v = video_from(vec![vec![0.0, 0.0, 1.0, 0.0]]);
        assert_eq!(gold_label(&v, TaskFamily::ArgmaxChannel).unwrap(), Vocab::letter(2));
    }

    #[test]
    fn argmax_ties_go_to_lowest_letter() {
        let v = video_from(vec![vec![0.0, 0.3, 0.3, 0.0]]);
        assert_eq!(gold_label(&v, TaskFamily::ArgmaxChannel).unwrap(), Vocab::letter(1));
    }

    #[test]
    fn temporal_tie_resolves_to_b() {
        let v = video_from(vec![vec![0.0; 8]; 6]);
        assert_eq!(gold_label(&v, TaskFamily::TemporalHalf).unwrap(), Vocab::letter(1));
    }

    #[test]
    fn argmax_requires_divisible_dim() {
        let v = video_from(vec![vec![0.0; 6]]);
        assert!(gen_task(&v, TaskFamily::ArgmaxChannel).is_err());
        assert!(gen_task(&v, TaskFamily::TemporalHalf).is_ok());
    }

    #[test]
    fn empty_video_rejected() {
        let v = video_from(vec![]);
        assert!(matches!(gen_task(&v, TaskFamily::TemporalHalf), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn build_sequence_lengths_and_order() {
        let v = gen_video(3, 3, 32).unwrap();
        let mut sample = gen_task(&v, TaskFamily::ArgmaxChannel).unwrap();
        sample.question_tokens = vec![10, 11, 12, 13, 14];
        let emb: Embeddings = Arc::new(vec![vec![0.5; 4]; 3]);
        let seq = build_sequence(emb, &sample).unwrap();
        assert_eq!(seq.total_len(), 8);
        assert!((0..3).all(|p| seq.is_frame_position(p)));
        assert!((3..8).all(|p| !seq.is_frame_position(p)));

        assert!(build_sequence(Arc::new(vec![]), &sample).is_err());
        assert!(build_sequence(Arc::new(vec![vec![0.0; 4], vec![0.0; 3]]), &sample).is_err());
    }

    #[test]
    fn vocab_renders_specials() {
        let vocab = Vocab::default();
        let s = vocab.render_tokens(&[THINK_OPEN, 12, THINK_CLOSE, ANS_OPEN, Vocab::letter(1), ANS_CLOSE]);
        assert_eq!(s, "<think> w12 </think><answer>B</answer>");
        assert!(Vocab::new(15).is_err());
    }

    #[test]
    fn dataset_round_trip_preserves_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let samples: Vec<Sample> = (0..10)
            .map(|i| {
                let v = gen_video(100 + i, 9, 32).unwrap();
                gen_task(&v, TaskFamily::ALL[i as usize % 2]).unwrap()
            })
            .collect();
        write_dataset(&path, &samples).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, samples);
        for s in &back {
            let v = s.video.generate().unwrap();
            assert_eq!(gold_label(&v, s.family).unwrap(), s.gold_answer);
        }
    }

    #[test]
    fn dataset_parse_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let v = gen_video(1, 2, 32).unwrap();
        let good = serde_json::to_string(&SampleRecord::from(&gen_task(&v, TaskFamily::ArgmaxChannel).unwrap())).unwrap();
        std::fs::write(&path, format!("{good}\n{{\"id\": 3}}\n")).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
