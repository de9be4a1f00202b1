//! Independent reference computations for the integration tests.
//!
//! Nothing here calls into the scoring, statistics or enumeration code of
//! the crate under test; only label and sample types are shared.

#![allow(dead_code)]

use mvp_core::types::CandidateLabel;
use statrs::distribution::{ContinuousCDF, Normal};

pub const ALPHA: f64 = 3.0;
pub const GAMMA: f64 = 0.9;

pub fn labels(s: &str) -> Vec<CandidateLabel> {
    s.chars().map(|c| CandidateLabel::from_char(c).unwrap()).collect()
}

/// Every duplicate-free sequence of length `k` over a pool of `pool` labels,
/// in lexicographic order, found by counting in base `pool`.
pub fn duplicate_free_sequences(pool: usize, k: usize) -> Vec<Vec<CandidateLabel>> {
    let mut out = Vec::new();
    let total = pool.pow(k as u32);
    for code in 0..total {
        let mut digits = vec![0usize; k];
        let mut c = code;
        for d in digits.iter_mut().rev() {
            *d = c % pool;
            c /= pool;
        }
        let mut seen = vec![false; pool];
        if digits.iter().all(|&d| !std::mem::replace(&mut seen[d], true)) {
            out.push(digits.into_iter().map(|d| CandidateLabel::from_index(d).unwrap()).collect());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Exact,
    Content,
    ContentSequence,
}

/// Token score: alpha/K per exact position, gamma/K per label that is in the
/// answer but at the wrong position.
pub fn oracle_token(pred: &[CandidateLabel], truth: &[CandidateLabel], mode: Mode) -> f64 {
    let k = truth.len() as f64;
    let mut s = 0.0;
    for (i, p) in pred.iter().enumerate().take(truth.len()) {
        if *p == truth[i] {
            s += ALPHA / k;
        } else if mode != Mode::Exact && truth.contains(p) {
            s += GAMMA / k;
        }
    }
    s
}

/// Continuity bonus found by walking every diagonal `t - p = d` with
/// `d != 0`, cutting it into maximal matching stretches of length >= 2, then
/// taking stretches longest first (ties: smaller p, then smaller t) while
/// they do not reuse a prediction position.
pub fn oracle_bonus(pred: &[CandidateLabel], truth: &[CandidateLabel]) -> f64 {
    let k = truth.len();
    let pred = &pred[..pred.len().min(k)];
    let n = pred.len() as isize;
    let mut stretches: Vec<(usize, usize, usize)> = Vec::new();
    for d in -(n - 1)..(k as isize) {
        if d == 0 {
            continue;
        }
        let mut run_start: Option<usize> = None;
        for p in 0..=pred.len() {
            let t = p as isize + d;
            let hit = p < pred.len() && t >= 0 && (t as usize) < k && pred[p] == truth[t as usize];
            match (hit, run_start) {
                (true, None) => run_start = Some(p),
                (false, Some(s)) => {
                    if p - s >= 2 {
                        stretches.push((p - s, s, (s as isize + d) as usize));
                    }
                    run_start = None;
                }
                _ => {}
            }
        }
    }
    stretches.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut covered = vec![false; pred.len()];
    let mut total = 0;
    for (len, p, _) in stretches {
        if (p..p + len).any(|i| covered[i]) {
            continue;
        }
        (p..p + len).for_each(|i| covered[i] = true);
        total += len;
    }
    GAMMA / k as f64 * total as f64
}

pub fn oracle_r_correct(pred: &[CandidateLabel], truth: &[CandidateLabel], mode: Mode) -> f64 {
    let bonus = if mode == Mode::ContentSequence { oracle_bonus(pred, truth) } else { 0.0 };
    oracle_token(pred, truth, mode) + bonus
}

/// Two-pass mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let (mx, sx) = mean_std(&rx);
    let (my, sy) = mean_std(&ry);
    let cov = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / rx.len() as f64;
    cov / (sx * sy)
}

/// Two-sided Mann-Kendall trend test p-value (normal approximation with
/// tie correction and continuity correction).
pub fn mann_kendall_p(x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            s += (x[j] - x[i]).partial_cmp(&0.0).map_or(0, |o| o as i64);
        }
    }
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ties = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * (t - 1.0) * (2.0 * t + 5.0);
        i = j + 1;
    }
    let nf = n as f64;
    let var = (nf * (nf - 1.0) * (2.0 * nf + 5.0) - ties) / 18.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = match s.signum() {
        1 => (s as f64 - 1.0) / var.sqrt(),
        -1 => (s as f64 + 1.0) / var.sqrt(),
        _ => 0.0,
    };
    2.0 * (1.0 - Normal::standard().cdf(z.abs()))
}

pub fn cosine(u: &[f32], v: &[f32]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| a as f64 * a as f64).sum::<f64>().sqrt();
    dot / (nu * nv)
}
