//! Training-sample synthesis from per-frame embedding streams.
//!
//! Frames are selected forward from a start frame, skipping any frame whose
//! similarity to the last *selected* frame exceeds `kappa`. A contiguous run
//! of the selection is masked, distractors are drawn from outside the
//! selected span within a time window, and the pool is shuffled and lettered.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::types::{format_label_list, Candidate, CandidateLabel, FrameRef, MvpSample, MAX_POOL_SIZE};

pub const MVPE_MAGIC: &[u8; 4] = b"MVPE";
pub const MVPE_VERSION: u32 = 1;
pub const MVPE_EXTENSION: &str = "mvpe";

const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error("invalid embedding sequence {video_id}: {reason}")]
    InvalidSequence { video_id: String, reason: String },
    #[error("start frame {0} not present in sequence")]
    UnknownStart(u32),
    #[error("only {achieved} distinct frames selectable, needed {needed}")]
    InsufficientFrames { achieved: usize, needed: usize },
    #[error("only {available} vicinity frames available, needed {needed} distractors")]
    DistractorShortage { available: usize, needed: usize },
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("quality filter aborted after {} rollouts: {reason}", partial_scores.len())]
    FilterAborted { partial_scores: Vec<f64>, reason: String },
    #[error("no samples could be produced")]
    EmptyCorpus,
    #[error("prompt template field `{field}` is missing placeholder {placeholder}")]
    Template { field: &'static str, placeholder: &'static str },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthesisError + '_ {
    move |source| SynthesisError::Io { path: path.to_path_buf(), source }
}

/// One decoded frame with its embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedFrame<T = f32> {
    pub frame_index: u32,
    pub timestamp_s: f64,
    pub vector: Vec<T>,
}

/// Unit-norm frame embeddings of one video in decode order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence<T = f32> {
    pub video_id: String,
    pub dim: usize,
    pub frames: Vec<EmbeddedFrame<T>>,
}

impl<T: Scalar> EmbeddingSequence<T> {
    /// Validates ordering and dimensions, normalizing any vector whose norm
    /// is not already within `1e-4` of one.
    pub fn new(video_id: impl Into<String>, dim: usize, mut frames: Vec<EmbeddedFrame<T>>) -> Result<Self, SynthesisError> {
        let video_id = video_id.into();
        let invalid = |reason: String| SynthesisError::InvalidSequence { video_id: video_id.clone(), reason };
        if dim == 0 {
            return Err(invalid("dimension must be positive".into()));
        }
        for (i, f) in frames.iter_mut().enumerate() {
            if f.vector.len() != dim {
                return Err(invalid(format!("frame {} has dimension {}", f.frame_index, f.vector.len())));
            }
            if !(f.timestamp_s.is_finite() && f.timestamp_s >= 0.0) {
                return Err(invalid(format!("frame {} has bad timestamp {}", f.frame_index, f.timestamp_s)));
            }
            let norm = f.vector.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !norm.is_finite() || norm == T::zero() {
                return Err(invalid(format!("frame at position {i} has zero or non-finite norm")));
            }
            if (norm.as_f64() - 1.0).abs() > UNIT_NORM_TOLERANCE {
                f.vector.iter_mut().for_each(|x| *x = *x / norm);
            }
        }
        if let Some(w) = frames.windows(2).find(|w| w[0].frame_index >= w[1].frame_index) {
            return Err(invalid(format!("frame_index not increasing at {}", w[1].frame_index)));
        }
        Ok(Self { video_id, dim, frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_ref(&self, position: usize) -> FrameRef {
        let f = &self.frames[position];
        FrameRef::new(self.video_id.clone(), f.timestamp_s, f.frame_index)
    }

    pub fn position_of(&self, frame_index: u32) -> Option<usize> {
        self.frames.binary_search_by_key(&frame_index, |f| f.frame_index).ok()
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingSequence<U> {
        EmbeddingSequence {
            video_id: self.video_id.clone(),
            dim: self.dim,
            frames: self
                .frames
                .iter()
                .map(|f| EmbeddedFrame {
                    frame_index: f.frame_index,
                    timestamp_s: f.timestamp_s,
                    vector: f.vector.iter().map(|&x| U::lit(x.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Reads one MVPE stream.
pub fn read_mvpe<R: Read>(mut reader: R, video_id: &str) -> Result<EmbeddingSequence<f32>, SynthesisError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io_err(Path::new(video_id)))?;
    let mut cursor = bytes.as_slice();
    let mut take = |n: usize, what: &str| -> Result<&[u8], SynthesisError> {
        if cursor.len() < n {
            return Err(SynthesisError::Format(format!("{video_id}: truncated while reading {what}")));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let f32_at = |b: &[u8]| f32::from_le_bytes(b.try_into().expect("4 bytes"));

    if take(4, "magic")? != MVPE_MAGIC {
        return Err(SynthesisError::Format(format!("{video_id}: bad magic")));
    }
    let version = u32_at(take(4, "version")?);
    if version != MVPE_VERSION {
        return Err(SynthesisError::Format(format!("{video_id}: unsupported version {version}")));
    }
    let dim = u32_at(take(4, "dim")?) as usize;
    let count = u32_at(take(4, "frame count")?) as usize;
    if dim == 0 {
        return Err(SynthesisError::Format(format!("{video_id}: zero dimension")));
    }

    let mut frames = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let frame_index = u32_at(take(4, "frame index")?);
        let timestamp_s = f32_at(take(4, "timestamp")?) as f64;
        let raw = take(4 * dim, "vector")?;
        let vector = raw.chunks_exact(4).map(f32_at).collect();
        frames.push(EmbeddedFrame { frame_index, timestamp_s, vector });
    }
    if !cursor.is_empty() {
        return Err(SynthesisError::Format(format!("{video_id}: {} trailing bytes", cursor.len())));
    }
    EmbeddingSequence::new(video_id, dim, frames)
}

/// Writes one MVPE stream (little endian).
pub fn write_mvpe<W: Write>(mut out: W, seq: &EmbeddingSequence<f32>) -> std::io::Result<()> {
    out.write_all(MVPE_MAGIC)?;
    out.write_all(&MVPE_VERSION.to_le_bytes())?;
    out.write_all(&(seq.dim as u32).to_le_bytes())?;
    out.write_all(&(seq.frames.len() as u32).to_le_bytes())?;
    for f in &seq.frames {
        out.write_all(&f.frame_index.to_le_bytes())?;
        out.write_all(&(f.timestamp_s as f32).to_le_bytes())?;
        for x in &f.vector {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_mvpe_file(path: &Path) -> Result<EmbeddingSequence<f32>, SynthesisError> {
    let video_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| SynthesisError::Format(format!("cannot derive video id from {}", path.display())))?;
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_mvpe(std::io::BufReader::new(file), video_id)
}

pub fn write_mvpe_file(dir: &Path, seq: &EmbeddingSequence<f32>) -> Result<PathBuf, SynthesisError> {
    let path = dir.join(format!("{}.{MVPE_EXTENSION}", seq.video_id));
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    write_mvpe(std::io::BufWriter::new(file), seq).map_err(io_err(&path))?;
    Ok(path)
}

/// Loads every `*.mvpe` file of a directory, sorted by video id.
pub fn load_mvpe_dir(dir: &Path) -> Result<Vec<EmbeddingSequence<f32>>, SynthesisError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(MVPE_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_mvpe_file(p)).collect()
}

/// Dot product of two unit vectors.
pub fn cosine_similarity<T: Scalar>(u: &[T], v: &[T]) -> Result<T, SynthesisError> {
    if u.len() != v.len() {
        return Err(SynthesisError::DimensionMismatch { left: u.len(), right: v.len() });
    }
    Ok(u.iter().zip(v).map(|(&a, &b)| a * b).sum())
}

/// Positions (into `seq.frames`) of the de-duplicated selection.
pub fn select_positions<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    start_position: usize,
    n: usize,
    kappa: T,
) -> Result<Vec<usize>, SynthesisError> {
    if start_position >= seq.frames.len() {
        return Err(SynthesisError::UnknownStart(start_position as u32));
    }
    let mut selected = vec![start_position];
    let mut current = &seq.frames[start_position].vector;
    for (pos, frame) in seq.frames.iter().enumerate().skip(start_position + 1) {
        if selected.len() >= n {
            break;
        }
        if cosine_similarity(current, &frame.vector)? > kappa {
            continue;
        }
        selected.push(pos);
        current = &frame.vector;
    }
    if selected.len() < n {
        return Err(SynthesisError::InsufficientFrames { achieved: selected.len(), needed: n });
    }
    Ok(selected)
}

/// Selects `n` frames forward from `start`, discarding frames more similar
/// than `kappa` to the most recently selected one.
pub fn select_deduplicated<T: Scalar>(
    seq: &EmbeddingSequence<T>,
    start: u32,
    n: usize,
    kappa: T,
) -> Result<Vec<FrameRef>, SynthesisError> {
    let start_position = seq.position_of(start).ok_or(SynthesisError::UnknownStart(start))?;
    Ok(select_positions(seq, start_position, n.max(1), kappa)?.into_iter().map(|p| seq.frame_ref(p)).collect())
}

/// Synthesis parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Similarity above which a frame is skipped as redundant.
    pub kappa: f64,
    /// Frames per selected sequence.
    pub sequence_len_n: usize,
    /// Masked frames plus distractors.
    pub pool_size: usize,
    /// Sampling weight per mask count.
    pub mask_count_weights: BTreeMap<usize, f64>,
    /// Maximum distance in seconds from the selected span for distractors.
    pub vicinity_window_s: f64,
    pub rng_seed: u64,
    /// Mask a contiguous run of the selection; when false, mask arbitrary positions.
    pub contiguous_mask: bool,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            kappa: 0.95,
            sequence_len_n: 15,
            pool_size: crate::types::DEFAULT_POOL_SIZE,
            mask_count_weights: BTreeMap::from([(2, 1.0), (3, 2.0), (4, 1.0)]),
            vicinity_window_s: 120.0,
            rng_seed: 0,
            contiguous_mask: true,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |m: String| Err(SynthesisError::Config(m));
        if !(0.0..=1.0).contains(&self.kappa) {
            return bad(format!("kappa {} outside [0,1]", self.kappa));
        }
        if self.pool_size > MAX_POOL_SIZE {
            return bad(format!("pool_size {} exceeds {MAX_POOL_SIZE}", self.pool_size));
        }
        if !(self.vicinity_window_s.is_finite() && self.vicinity_window_s >= 0.0) {
            return bad("vicinity_window_s must be non-negative".into());
        }
        if self.mask_count_weights.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("mask count weights must be non-negative".into());
        }
        let active: Vec<usize> = self.active_mask_counts().collect();
        if active.is_empty() {
            return bad("no mask count has positive weight".into());
        }
        for m in active {
            self.check_mask_count(m)?;
        }
        Ok(())
    }

    fn active_mask_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask_count_weights.iter().filter(|(_, &w)| w > 0.0).map(|(&m, _)| m)
    }

    fn check_mask_count(&self, m: usize) -> Result<(), SynthesisError> {
        if m == 0 || m >= self.sequence_len_n {
            return Err(SynthesisError::Config(format!(
                "mask count {m} must be in 1..{} (sequence length)",
                self.sequence_len_n
            )));
        }
        if m >= self.pool_size {
            return Err(SynthesisError::Config(format!("mask count {m} must be below pool size {}", self.pool_size)));
        }
        Ok(())
    }

    /// Draws a mask count from `mask_count_weights`.
    pub fn draw_mask_count<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize, SynthesisError> {
        let (counts, weights): (Vec<usize>, Vec<f64>) = self.mask_count_weights.iter().map(|(&m, &w)| (m, w)).unzip();
        let dist = WeightedIndex::new(&weights).map_err(|e| SynthesisError::Config(format!("mask count weights: {e}")))?;
        Ok(counts[dist.sample(rng)])
    }
}

/// Builds a sample with a mask count drawn from the config weights.
pub fn build_sample<R: Rng + ?Sized, T: Scalar>(
    selected: &[FrameRef],
    config: &SynthesisConfig,
    rng: &mut R,
    all_frames: &EmbeddingSequence<T>,
) -> Result<MvpSample, SynthesisError> {
    let m = config.draw_mask_count(rng)?;
    build_sample_with_mask_count(selected, m, config, rng, all_frames)
}

/// Builds a sample masking `m` frames of `selected`.
pub fn build_sample_with_mask_count<R: Rng + ?Sized, T: Scalar>(
    selected: &[FrameRef],
    m: usize,
    config: &SynthesisConfig,
    rng: &mut R,
    all_frames: &EmbeddingSequence<T>,
) -> Result<MvpSample, SynthesisError> {
    let n = selected.len();
    if n < 2 {
        return Err(SynthesisError::Config(format!("selection of {n} frames is too short")));
    }
    config.check_mask_count(m)?;
    if m >= n {
        return Err(SynthesisError::Config(format!("mask count {m} must be below selection length {n}")));
    }
    let seed = rng.next_u64();

    let masked: Vec<usize> = if config.contiguous_mask {
        let start = rng.gen_range(0..=n - m);
        (start..start + m).collect()
    } else {
        let mut picks = index::sample(rng, n, m).into_vec();
        picks.sort_unstable();
        picks
    };

    let first = &selected[0];
    let last = &selected[n - 1];
    let window = config.vicinity_window_s;
    let vicinity: Vec<FrameRef> = all_frames
        .frames
        .iter()
        .filter(|f| {
            (f.frame_index < first.frame_index && first.timestamp_s - f.timestamp_s <= window)
                || (f.frame_index > last.frame_index && f.timestamp_s - last.timestamp_s <= window)
        })
        .map(|f| FrameRef::new(all_frames.video_id.clone(), f.timestamp_s, f.frame_index))
        .collect();
    let l = config.pool_size - m;
    if vicinity.len() < l {
        return Err(SynthesisError::DistractorShortage { available: vicinity.len(), needed: l });
    }
    let distractors = index::sample(rng, vicinity.len(), l).into_iter().map(|i| vicinity[i].clone());

    let targets: Vec<FrameRef> = masked.iter().map(|&i| selected[i].clone()).collect();
    let mut pool: Vec<(FrameRef, bool)> =
        targets.iter().cloned().map(|f| (f, true)).chain(distractors.map(|f| (f, false))).collect();
    pool.shuffle(rng);

    let candidates: Vec<Candidate> = pool
        .iter()
        .enumerate()
        .map(|(i, (frame, _))| Candidate { label: CandidateLabel::from_index(i).expect("pool within alphabet"), frame: frame.clone() })
        .collect();
    let answer = targets
        .iter()
        .map(|t| candidates.iter().find(|c| &c.frame == t).expect("target in pool").label)
        .collect();

    let context = selected.iter().enumerate().filter(|(i, _)| !masked.contains(i)).map(|(_, f)| f.clone()).collect();
    Ok(MvpSample {
        sample_id: format!("{}-f{:06}-m{m}", first.video_id, first.frame_index),
        context,
        gap_position: masked[0],
        candidates,
        answer,
        mask_count: m,
        distractor_count: l,
        seed,
    })
}

/// Produces correctness scores for a sample, e.g. one sampled answer per call.
pub trait RolloutScorer {
    fn score(&mut self, sample: &MvpSample) -> Result<f64, String>;
}

impl<F: FnMut(&MvpSample) -> Result<f64, String>> RolloutScorer for F {
    fn score(&mut self, sample: &MvpSample) -> Result<f64, String> {
        self(sample)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub sample_id: String,
    pub rollout_scores: Vec<f64>,
    pub kept: bool,
}

pub const DEFAULT_FILTER_ROLLOUTS: usize = 10;

/// Keeps a sample iff at least one of `rollouts` scored answers earns a positive reward.
pub fn quality_filter(
    sample: &MvpSample,
    scorer: &mut dyn RolloutScorer,
    rollouts: usize,
) -> Result<FilterVerdict, SynthesisError> {
    let mut scores = Vec::with_capacity(rollouts);
    for _ in 0..rollouts {
        match scorer.score(sample) {
            Ok(s) => scores.push(s),
            Err(reason) => return Err(SynthesisError::FilterAborted { partial_scores: scores, reason }),
        }
    }
    let kept = scores.iter().any(|&s| s > 0.0);
    Ok(FilterVerdict { sample_id: sample.sample_id.clone(), rollout_scores: scores, kept })
}

/// Counters collected while synthesizing a corpus.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub targets: BTreeMap<usize, usize>,
    pub achieved: BTreeMap<usize, usize>,
    pub samples: usize,
    pub videos_total: usize,
    /// Videos where no start frame yields a full de-duplicated selection.
    pub videos_skipped: Vec<String>,
    pub distractor_shortages: usize,
    pub filtered_out: usize,
    pub kappa: f64,
    pub sequence_len_n: usize,
    pub pool_size: usize,
    pub vicinity_window_s: f64,
    pub rng_seed: u64,
}

/// A feasible start frame and its selection.
struct Slot {
    start_frame: u32,
    selected: Vec<FrameRef>,
    seed: u64,
}

fn video_rng(seed: u64, video_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(video_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

fn video_slots<T: Scalar>(seq: &EmbeddingSequence<T>, config: &SynthesisConfig) -> Vec<Slot> {
    let mut rng = video_rng(config.rng_seed, &seq.video_id);
    let mut starts: Vec<usize> = (0..seq.frames.len()).collect();
    starts.shuffle(&mut rng);
    let kappa = T::lit(config.kappa);
    starts
        .into_iter()
        .filter_map(|pos| {
            let seed = rng.next_u64();
            let selected = select_positions(seq, pos, config.sequence_len_n, kappa).ok()?;
            Some(Slot {
                start_frame: seq.frames[pos].frame_index,
                selected: selected.into_iter().map(|p| seq.frame_ref(p)).collect(),
                seed,
            })
        })
        .collect()
}

/// Synthesizes samples until every target count is met or inputs run out.
///
/// Videos are visited round-robin in `video_id` order, each contributing its
/// feasible start frames in a seeded random order. The mask count of each
/// sample is drawn with weights equal to the remaining per-count quota.
/// Output is ordered by `(video_id, start frame)`.
pub fn synthesize_corpus<T: Scalar>(
    inputs: &[EmbeddingSequence<T>],
    config: &SynthesisConfig,
    target_counts: &BTreeMap<usize, usize>,
    mut filter: Option<&mut dyn RolloutScorer>,
) -> Result<(Vec<MvpSample>, SynthesisReport), SynthesisError> {
    for &m in target_counts.keys() {
        config.check_mask_count(m)?;
    }
    if !(0.0..=1.0).contains(&config.kappa) {
        return Err(SynthesisError::Config(format!("kappa {} outside [0,1]", config.kappa)));
    }

    let mut order: Vec<&EmbeddingSequence<T>> = inputs.iter().collect();
    order.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    let slots: Vec<Vec<Slot>> = order.par_iter().map(|seq| video_slots(seq, config)).collect();

    let mut report = SynthesisReport {
        targets: target_counts.clone(),
        achieved: target_counts.keys().map(|&m| (m, 0)).collect(),
        videos_total: inputs.len(),
        videos_skipped: order.iter().zip(&slots).filter(|(_, s)| s.is_empty()).map(|(v, _)| v.video_id.clone()).collect(),
        kappa: config.kappa,
        sequence_len_n: config.sequence_len_n,
        pool_size: config.pool_size,
        vicinity_window_s: config.vicinity_window_s,
        rng_seed: config.rng_seed,
        ..Default::default()
    };

    let mut remaining = target_counts.clone();
    let mut master = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut cursors = vec![0usize; slots.len()];
    let mut produced: Vec<(usize, u32, MvpSample)> = Vec::new();

    'outer: loop {
        let mut progressed = false;
        for (v, video_slots) in slots.iter().enumerate() {
            if remaining.values().all(|&c| c == 0) {
                break 'outer;
            }
            let Some(slot) = video_slots.get(cursors[v]) else { continue };
            cursors[v] += 1;
            progressed = true;

            let (counts, weights): (Vec<usize>, Vec<usize>) = remaining.iter().map(|(&m, &c)| (m, c)).unzip();
            let m = counts[WeightedIndex::new(&weights).expect("some quota left").sample(&mut master)];

            let mut rng = ChaCha8Rng::seed_from_u64(slot.seed);
            let mut sample = match build_sample_with_mask_count(&slot.selected, m, config, &mut rng, order[v]) {
                Ok(s) => s,
                Err(SynthesisError::DistractorShortage { .. }) => {
                    report.distractor_shortages += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            sample.seed = slot.seed;

            if let Some(scorer) = filter.as_deref_mut() {
                if !quality_filter(&sample, scorer, DEFAULT_FILTER_ROLLOUTS)?.kept {
                    report.filtered_out += 1;
                    continue;
                }
            }
            *remaining.get_mut(&m).expect("target key") -= 1;
            *report.achieved.get_mut(&m).expect("target key") += 1;
            produced.push((v, slot.start_frame, sample));
        }
        if !progressed {
            break;
        }
    }

    if produced.is_empty() {
        return Err(SynthesisError::EmptyCorpus);
    }
    produced.sort_by_key(|(v, start, _)| (*v, *start));
    let samples: Vec<MvpSample> = produced.into_iter().map(|(_, _, s)| s).collect();
    report.samples = samples.len();
    Ok((samples, report))
}

/// Text layout of a prompt.
///
/// `body` must contain `{context}` and `{candidates}`; it may also use
/// `{mask_count}` and `{answer_format}`. `frame_item` may use `{position}`
/// and `{timestamp}`; `candidate_item` must contain `{label}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub body: String,
    pub frame_item: String,
    pub gap_marker: String,
    pub candidate_item: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            body: "The frames below are sampled from one video in temporal order. \
                   A continuous segment of {mask_count} frames is missing where the gap marker appears.\n\
                   {context}\n\
                   Candidate frames:\n\
                   {candidates}\n\
                   Choose the {mask_count} candidates that fill the gap and list them in temporal order. \
                   Reason inside <think></think> tags, then give the final answer inside <answer></answer> tags \
                   as a bracketed list of letters, e.g. <answer>The answer is {answer_format}</answer>."
                .into(),
            frame_item: "Frame {position} ({timestamp}s): <image>".into(),
            gap_marker: "[MISSING SEGMENT]".into(),
            candidate_item: "({label}) <image>".into(),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), SynthesisError> {
        let required: [(&'static str, &str, &'static str); 3] = [
            ("body", &self.body, "{context}"),
            ("body", &self.body, "{candidates}"),
            ("candidate_item", &self.candidate_item, "{label}"),
        ];
        for (field, text, placeholder) in required {
            if !text.contains(placeholder) {
                return Err(SynthesisError::Template { field, placeholder });
            }
        }
        if self.gap_marker.trim().is_empty() {
            return Err(SynthesisError::Template { field: "gap_marker", placeholder: "non-empty marker" });
        }
        Ok(())
    }
}

/// Example answer list of length `k` ending at `z`, e.g. `[x,y,z]`.
fn answer_format_hint(k: usize) -> String {
    let k = k.clamp(1, MAX_POOL_SIZE);
    let labels: Vec<CandidateLabel> =
        (MAX_POOL_SIZE - k..MAX_POOL_SIZE).map(|i| CandidateLabel::from_index(i).expect("in alphabet")).collect();
    format_label_list(&labels)
}

/// Renders a deterministic prompt for `sample`.
pub fn render_prompt(sample: &MvpSample, template: &PromptTemplate) -> Result<String, SynthesisError> {
    template.validate()?;
    let gap = sample.gap_position.min(sample.context.len());
    let mut lines: Vec<String> = Vec::with_capacity(sample.context.len() + 1);
    for (i, frame) in sample.context.iter().enumerate() {
        if i == gap {
            lines.push(template.gap_marker.clone());
        }
        lines.push(
            template
                .frame_item
                .replace("{position}", &(i + 1).to_string())
                .replace("{timestamp}", &format!("{:.1}", frame.timestamp_s)),
        );
    }
    if gap == sample.context.len() {
        lines.push(template.gap_marker.clone());
    }

    let mut candidates: Vec<&Candidate> = sample.candidates.iter().collect();
    candidates.sort_by_key(|c| c.label);
    let candidate_lines: Vec<String> =
        candidates.iter().map(|c| template.candidate_item.replace("{label}", &c.label.to_string())).collect();

    let vars: HashMap<&str, String> = HashMap::from([
        ("{context}", lines.join("\n")),
        ("{candidates}", candidate_lines.join("\n")),
        ("{mask_count}", sample.mask_count.to_string()),
        ("{answer_format}", answer_format_hint(sample.mask_count)),
    ]);
    // single pass so placeholder-like text inside substituted values stays literal
    let mut out = String::with_capacity(template.body.len() + 256);
    let mut rest = template.body.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        match vars.iter().find(|(k, _)| tail.starts_with(**k)) {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}
