//! Shared domain types for masked video prediction samples.
//!
//! A sample holds the unmasked context frames, a shuffled candidate pool
//! mixing the masked frames with distractors, and the answer: the labels of
//! the masked frames in their original temporal order.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest candidate pool a single-letter label can address.
pub const MAX_POOL_SIZE: usize = 26;

/// Default candidate pool size (masked frames plus distractors).
pub const DEFAULT_POOL_SIZE: usize = 6;

/// Reference to one decoded frame of a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub timestamp_s: f64,
    pub frame_index: u32,
}

impl FrameRef {
    pub fn new(video_id: impl Into<String>, timestamp_s: f64, frame_index: u32) -> Self {
        Self { video_id: video_id.into(), timestamp_s, frame_index }
    }

    fn key(&self) -> (&str, u32) {
        (&self.video_id, self.frame_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("candidate label must be a single lowercase letter, got {0:?}")]
    NotALetter(String),
    #[error("candidate index {0} exceeds the {MAX_POOL_SIZE}-letter alphabet")]
    IndexOutOfRange(usize),
}

/// Lowercase letter naming a slot in the candidate pool (`a` is slot 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CandidateLabel(u8);

impl CandidateLabel {
    pub fn from_index(index: usize) -> Result<Self, LabelError> {
        if index >= MAX_POOL_SIZE {
            return Err(LabelError::IndexOutOfRange(index));
        }
        Ok(Self(b'a' + index as u8))
    }

    pub fn from_char(c: char) -> Result<Self, LabelError> {
        if c.is_ascii_lowercase() {
            Ok(Self(c as u8))
        } else {
            Err(LabelError::NotALetter(c.to_string()))
        }
    }

    pub fn index(self) -> usize {
        (self.0 - b'a') as usize
    }

    pub fn as_char(self) -> char {
        self.0 as char
    }
}

impl fmt::Display for CandidateLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl std::str::FromStr for CandidateLabel {
    type Err = LabelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => Self::from_char(c),
            _ => Err(LabelError::NotALetter(s.to_string())),
        }
    }
}

impl Serialize for CandidateLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut buf = [0u8; 4];
        serializer.serialize_str(self.as_char().encode_utf8(&mut buf))
    }
}

impl<'de> Deserialize<'de> for CandidateLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Formats labels as the bracketed answer list, e.g. `[b,a,c]`.
pub fn format_label_list(labels: &[CandidateLabel]) -> String {
    let inner: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
    format!("[{}]", inner.join(","))
}

/// One entry of the shuffled candidate pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: CandidateLabel,
    pub frame: FrameRef,
}

/// One cloze instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvpSample {
    pub sample_id: String,
    /// Unmasked frames in temporal order.
    pub context: Vec<FrameRef>,
    /// Index into `context` where the masked segment belongs; the gap sits
    /// before `context[gap_position]`, or at the end when equal to its length.
    pub gap_position: usize,
    pub candidates: Vec<Candidate>,
    /// Ground-truth labels of the masked frames, in temporal order.
    pub answer: Vec<CandidateLabel>,
    pub mask_count: usize,
    pub distractor_count: usize,
    pub seed: u64,
}

impl MvpSample {
    pub fn pool_size(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidate(&self, label: CandidateLabel) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.label == label)
    }

    /// Masked frames in answer order.
    pub fn target_frames(&self) -> Vec<&FrameRef> {
        self.answer.iter().filter_map(|&l| self.candidate(l).map(|c| &c.frame)).collect()
    }
}

/// A policy's answer, possibly malformed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prediction {
    pub labels: Vec<CandidateLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
}

impl Prediction {
    pub fn new(labels: Vec<CandidateLabel>) -> Self {
        Self { labels, raw_text: None }
    }

    /// Builds a prediction from a string of letters, e.g. `"bca"`.
    pub fn from_letters(letters: &str) -> Result<Self, LabelError> {
        let labels = letters.chars().map(CandidateLabel::from_char).collect::<Result<_, _>>()?;
        Ok(Self::new(labels))
    }
}

/// Broken sample invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// `mask_count` is zero.
    EmptyMask,
    PoolSizeMismatch { candidates: usize, mask_count: usize, distractor_count: usize },
    AnswerLengthMismatch { answer: usize, mask_count: usize },
    DuplicateAnswerLabel(CandidateLabel),
    AnswerLabelMissing(CandidateLabel),
    DuplicateCandidateLabel(CandidateLabel),
    /// Label letter index not below the pool size.
    LabelOutOfRange { label: CandidateLabel, pool_size: usize },
    /// Answer-referenced frames are not in strictly increasing frame order.
    AnswerTemporalOrder { frame_indices: Vec<u32> },
    ContextCandidateOverlap { frame_index: u32 },
    ContextTemporalOrder { position: usize },
    GapOutOfRange { gap_position: usize, context_len: usize },
}

impl Violation {
    /// Stable name of the invariant.
    pub fn name(&self) -> &'static str {
        match self {
            Violation::EmptyMask => "mask count positive",
            Violation::PoolSizeMismatch { .. } => "pool size equals mask plus distractors",
            Violation::AnswerLengthMismatch { .. } => "answer length equals mask count",
            Violation::DuplicateAnswerLabel(_) => "answer labels distinct",
            Violation::AnswerLabelMissing(_) => "answer labels in candidates",
            Violation::DuplicateCandidateLabel(_) => "candidate labels distinct",
            Violation::LabelOutOfRange { .. } => "label within pool",
            Violation::AnswerTemporalOrder { .. } => "answer temporally ordered",
            Violation::ContextCandidateOverlap { .. } => "context and candidates disjoint",
            Violation::ContextTemporalOrder { .. } => "context temporally ordered",
            Violation::GapOutOfRange { .. } => "gap position within context",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}", self.name(), self)
    }
}

/// Checks every sample invariant and returns the broken ones.
pub fn validate_sample(sample: &MvpSample) -> Vec<Violation> {
    let mut report = Vec::new();
    let pool = sample.candidates.len();

    if sample.mask_count == 0 {
        report.push(Violation::EmptyMask);
    }
    if sample.mask_count.checked_add(sample.distractor_count) != Some(pool) {
        report.push(Violation::PoolSizeMismatch {
            candidates: pool,
            mask_count: sample.mask_count,
            distractor_count: sample.distractor_count,
        });
    }
    if sample.answer.len() != sample.mask_count {
        report.push(Violation::AnswerLengthMismatch {
            answer: sample.answer.len(),
            mask_count: sample.mask_count,
        });
    }

    let mut seen = HashSet::new();
    for c in &sample.candidates {
        if !seen.insert(c.label) {
            report.push(Violation::DuplicateCandidateLabel(c.label));
        }
        if c.label.index() >= pool {
            report.push(Violation::LabelOutOfRange { label: c.label, pool_size: pool });
        }
    }

    let mut seen = HashSet::new();
    for &label in &sample.answer {
        if !seen.insert(label) {
            report.push(Violation::DuplicateAnswerLabel(label));
        }
        if sample.candidate(label).is_none() {
            report.push(Violation::AnswerLabelMissing(label));
        }
    }

    let frame_indices: Vec<u32> = sample.target_frames().iter().map(|f| f.frame_index).collect();
    if frame_indices.windows(2).any(|w| w[0] >= w[1]) {
        report.push(Violation::AnswerTemporalOrder { frame_indices });
    }

    let context_keys: HashSet<(&str, u32)> = sample.context.iter().map(FrameRef::key).collect();
    for c in &sample.candidates {
        if context_keys.contains(&c.frame.key()) {
            report.push(Violation::ContextCandidateOverlap { frame_index: c.frame.frame_index });
        }
    }

    for (i, w) in sample.context.windows(2).enumerate() {
        if w[0].video_id == w[1].video_id
            && (w[0].frame_index >= w[1].frame_index || w[0].timestamp_s >= w[1].timestamp_s)
        {
            report.push(Violation::ContextTemporalOrder { position: i + 1 });
        }
    }

    if sample.gap_position > sample.context.len() {
        report.push(Violation::GapOutOfRange {
            gap_position: sample.gap_position,
            context_len: sample.context.len(),
        });
    }

    report
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("serialization failed: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Writes samples as JSON lines, one object per line, LF-terminated.
pub fn write_jsonl<W: Write>(mut out: W, samples: &[MvpSample]) -> Result<(), DatasetError> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads JSON-line samples, skipping blank lines.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<MvpSample>, DatasetError> {
    let mut samples = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = serde_json::from_str(&line).map_err(|source| DatasetError::Parse { line: i + 1, source })?;
        samples.push(sample);
    }
    Ok(samples)
}
