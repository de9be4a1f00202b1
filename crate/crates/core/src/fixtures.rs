//! Deterministic synthetic inputs for tests, the `verify` suites and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::synthesis::{build_sample_with_mask_count, EmbeddedFrame, EmbeddingSequence, SynthesisConfig};
use crate::types::{FrameRef, MvpSample};

fn random_unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit vector with cosine similarity `similarity` to the unit vector `base`.
pub fn near_duplicate<R: Rng>(rng: &mut R, base: &[f32], similarity: f32) -> Vec<f32> {
    let base64: Vec<f64> = base.iter().map(|&x| x as f64).collect();
    let s = similarity as f64;
    loop {
        let w: Vec<f64> = random_unit(rng, base.len()).into_iter().map(|x| x as f64).collect();
        let dot: f64 = w.iter().zip(&base64).map(|(a, b)| a * b).sum();
        let ortho: Vec<f64> = w.iter().zip(&base64).map(|(a, b)| a - dot * b).collect();
        let n = ortho.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-6 {
            continue;
        }
        let t = (1.0 - s * s).sqrt();
        return base64.iter().zip(&ortho).map(|(b, o)| (s * b + t * o / n) as f32).collect();
    }
}

/// A 1 FPS video of `frames` frames. Each frame is a 0.99-similar copy of
/// its predecessor with probability `duplicate_prob`, otherwise a fresh
/// random direction.
pub fn synthetic_video(video_id: &str, frames: usize, dim: usize, duplicate_prob: f64, seed: u64) -> EmbeddingSequence<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<EmbeddedFrame<f32>> = Vec::with_capacity(frames);
    for i in 0..frames {
        let vector = match out.last() {
            Some(prev) if rng.gen_bool(duplicate_prob) => near_duplicate(&mut rng, &prev.vector, 0.99),
            _ => random_unit(&mut rng, dim),
        };
        out.push(EmbeddedFrame { frame_index: i as u32, timestamp_s: i as f64, vector });
    }
    EmbeddingSequence::new(video_id, dim, out).expect("synthetic sequence is valid")
}

/// `distinct` fresh frames, each followed by `copies` near-duplicates of
/// similarity 0.99. Returns the sequence and the positions of the fresh frames.
pub fn planted_duplicates(distinct: usize, copies: usize, dim: usize, seed: u64) -> (EmbeddingSequence<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = Vec::new();
    let mut fresh = Vec::new();
    for _ in 0..distinct {
        let base = random_unit(&mut rng, dim);
        fresh.push(frames.len());
        for c in 0..=copies {
            let vector = if c == 0 { base.clone() } else { near_duplicate(&mut rng, &base, 0.99) };
            let i = frames.len();
            frames.push(EmbeddedFrame { frame_index: i as u32, timestamp_s: i as f64, vector });
        }
    }
    (EmbeddingSequence::new("planted", dim, frames).expect("valid"), fresh)
}

/// A corpus of `videos` synthetic videos, each `frames` long.
pub fn synthetic_corpus(videos: usize, frames: usize, dim: usize, seed: u64) -> Vec<EmbeddingSequence<f32>> {
    (0..videos)
        .map(|v| synthetic_video(&format!("video{v:03}"), frames, dim, 0.3, seed.wrapping_mul(1_000_003).wrapping_add(v as u64)))
        .collect()
}

/// A valid sample with `k` masked frames in a pool of `pool_size`, built
/// without embeddings.
pub fn toy_sample(sample_id: &str, k: usize, pool_size: usize, seed: u64) -> MvpSample {
    let n = 15.max(k + 1);
    let total = n + 2 * pool_size + 10;
    let frames = (0..total)
        .map(|i| EmbeddedFrame { frame_index: i as u32, timestamp_s: i as f64, vector: vec![1.0f32] })
        .collect();
    let video = EmbeddingSequence::new(sample_id, 1, frames).expect("valid");
    let offset = pool_size + 5;
    let selected: Vec<FrameRef> = (offset..offset + n).map(|p| video.frame_ref(p)).collect();
    let config = SynthesisConfig { sequence_len_n: n, pool_size, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = build_sample_with_mask_count(&selected, k, &config, &mut rng, &video).expect("toy sample builds");
    sample.sample_id = sample_id.to_string();
    sample
}

/// `count` toy samples with mask count `k` and pool `pool_size`.
pub fn toy_corpus(count: usize, k: usize, pool_size: usize, seed: u64) -> Vec<MvpSample> {
    (0..count).map(|i| toy_sample(&format!("toy{i:05}"), k, pool_size, seed.wrapping_add(i as u64))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::cosine_similarity;
    use crate::types::validate_sample;

    #[test]
    fn near_duplicate_has_requested_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = random_unit(&mut rng, 16);
        let dup = near_duplicate(&mut rng, &base, 0.99);
        assert!((cosine_similarity(&base, &dup).unwrap() - 0.99).abs() < 1e-5);
    }

    #[test]
    fn toy_samples_are_valid() {
        for k in 1..=4 {
            let s = toy_sample("t", k, 6, k as u64);
            assert!(validate_sample(&s).is_empty(), "{:?}", validate_sample(&s));
            assert_eq!(s.answer.len(), k);
        }
        let s = toy_sample("t7", 4, 7, 3);
        assert_eq!(s.candidates.len(), 7);
    }
}
