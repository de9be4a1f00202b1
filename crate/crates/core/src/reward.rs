//! Hierarchical reward for masked video prediction answers.
//!
//! The correctness reward adds a per-position token score (full credit for
//! an exact match, partial credit for a label that belongs to the answer but
//! sits at the wrong position) and a continuity bonus for common runs that
//! are preserved at an offset. The total reward mixes correctness with a
//! binary format reward for the `<think>…</think><answer>…</answer>` layout.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::types::CandidateLabel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("ground-truth answer is empty")]
    EmptyTruth,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Which reward components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Only exact (content and position) matches earn credit.
    ExactOnly,
    /// Exact matches plus partial credit for misplaced answer labels.
    ContentAware,
    /// Content-aware scoring plus the offset continuity bonus.
    #[default]
    ContentPlusSequence,
}

impl RewardMode {
    pub const ALL: [RewardMode; 3] = [RewardMode::ExactOnly, RewardMode::ContentAware, RewardMode::ContentPlusSequence];

    pub fn as_str(self) -> &'static str {
        match self {
            RewardMode::ExactOnly => "exact_only",
            RewardMode::ContentAware => "content_aware",
            RewardMode::ContentPlusSequence => "content_plus_sequence",
        }
    }
}

impl std::str::FromStr for RewardMode {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RewardMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RewardError::InvalidConfig(format!("unknown reward mode {s:?}")))
    }
}

/// Reward constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig<T = f64> {
    /// Weight of an exact match, split evenly over the K positions.
    pub alpha: T,
    /// Weight of a content-only match and of each offset-run position.
    pub gamma: T,
    /// Share of the format reward in the total.
    pub beta_fmt: T,
    /// Shortest common run that earns the continuity bonus.
    pub min_substring_len: usize,
    pub mode: RewardMode,
    /// Give content credit only to the first occurrence of a repeated label.
    #[serde(default)]
    pub dedup_content: bool,
}

impl<T: Scalar> Default for RewardConfig<T> {
    fn default() -> Self {
        Self {
            alpha: T::lit(3.0),
            gamma: T::lit(0.9),
            beta_fmt: T::lit(0.1),
            min_substring_len: 2,
            mode: RewardMode::ContentPlusSequence,
            dedup_content: false,
        }
    }
}

impl<T: Scalar> RewardConfig<T> {
    pub fn with_mode(mode: RewardMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alpha > self.gamma && self.gamma > T::zero()) {
            return Err(RewardError::InvalidConfig(format!(
                "need alpha > gamma > 0, got alpha={} gamma={}",
                self.alpha, self.gamma
            )));
        }
        if !(self.beta_fmt >= T::zero() && self.beta_fmt <= T::one()) {
            return Err(RewardError::InvalidConfig(format!("beta_fmt must be in [0,1], got {}", self.beta_fmt)));
        }
        if self.min_substring_len == 0 {
            return Err(RewardError::InvalidConfig("min_substring_len must be positive".into()));
        }
        Ok(())
    }
}

/// Per-position verdict of the token score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Exact,
    Content,
    Miss,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionScore {
    pub label: CandidateLabel,
    pub verdict: Verdict,
}

/// A common run `pred[pred_start..pred_start+length) == truth[truth_start..truth_start+length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedRun {
    pub pred_start: usize,
    pub truth_start: usize,
    pub length: usize,
}

/// Prediction length differed from the answer length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthMismatch {
    pub predicted: usize,
    pub expected: usize,
}

/// Correctness reward and its decomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessBreakdown<T = f64> {
    pub token_score: T,
    pub continuity_bonus: T,
    pub r_correct: T,
    pub per_position: Vec<PositionScore>,
    pub matched_runs: Vec<MatchedRun>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_mismatch: Option<LengthMismatch>,
}

/// Full reward decomposition of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T = f64> {
    #[serde(flatten)]
    pub correctness: CorrectnessBreakdown<T>,
    /// 1 when the response layout is well formed, else 0.
    pub r_format: u8,
    pub r_total: T,
}

impl<T: Scalar> RewardBreakdown<T> {
    pub fn r_correct(&self) -> T {
        self.correctness.r_correct
    }
}

/// Result of parsing a raw model response.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedResponse {
    pub think: Option<String>,
    pub labels: Vec<CandidateLabel>,
    pub format_ok: bool,
}

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";

fn label_list_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\[\s*([A-Za-z](?:\s*,\s*[A-Za-z])*)\s*\]").expect("valid regex"))
}

fn first_label_list(text: &str) -> Vec<CandidateLabel> {
    let Some(caps) = label_list_regex().captures(text) else {
        return Vec::new();
    };
    caps[1]
        .split(',')
        .filter_map(|tok| tok.trim().chars().next())
        .filter_map(|c| CandidateLabel::from_char(c.to_ascii_lowercase()).ok())
        .collect()
}

fn strict_layout(raw: &str) -> Option<(&str, &str)> {
    for tag in [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE] {
        if raw.matches(tag).count() != 1 {
            return None;
        }
    }
    let body = raw.trim().strip_prefix(THINK_OPEN)?.strip_suffix(ANSWER_CLOSE)?;
    let (think, rest) = body.split_once(THINK_CLOSE)?;
    let answer = rest.trim_start().strip_prefix(ANSWER_OPEN)?;
    Some((think, answer))
}

/// Parses a raw response. Never fails; malformed text yields
/// `format_ok = false` and whatever labels could be recovered.
pub fn parse_response(raw: &str) -> ParsedResponse {
    if let Some((think, answer)) = strict_layout(raw) {
        return ParsedResponse { think: Some(think.to_string()), labels: first_label_list(answer), format_ok: true };
    }

    let think = raw.find(THINK_OPEN).and_then(|open| {
        let after = &raw[open + THINK_OPEN.len()..];
        after.find(THINK_CLOSE).map(|close| after[..close].to_string())
    });
    let labels = match raw.find(ANSWER_OPEN) {
        Some(open) => {
            let after = &raw[open + ANSWER_OPEN.len()..];
            let inner = after.find(ANSWER_CLOSE).map_or(after, |close| &after[..close]);
            first_label_list(inner)
        }
        None => first_label_list(raw),
    };
    ParsedResponse { think, labels, format_ok: false }
}

/// Token-level score and per-position verdicts.
///
/// Predictions longer than the answer are truncated; missing positions
/// score zero. Content credit is disabled in [`RewardMode::ExactOnly`].
pub fn token_score<T: Scalar>(
    pred: &[CandidateLabel],
    truth: &[CandidateLabel],
    cfg: &RewardConfig<T>,
) -> Result<(T, Vec<PositionScore>), RewardError> {
    let k = truth.len();
    if k == 0 {
        return Err(RewardError::EmptyTruth);
    }
    let k_t = T::of_usize(k);
    let exact = cfg.alpha / k_t;
    let content = if cfg.mode == RewardMode::ExactOnly { T::zero() } else { cfg.gamma / k_t };

    let mut score = T::zero();
    let mut verdicts = Vec::with_capacity(k.min(pred.len()));
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        let verdict = if p == t {
            score = score + exact;
            Verdict::Exact
        } else if truth.contains(&p) {
            if !(cfg.dedup_content && pred[..i].contains(&p)) {
                score = score + content;
            }
            Verdict::Content
        } else {
            Verdict::Miss
        };
        verdicts.push(PositionScore { label: p, verdict });
    }
    Ok((score, verdicts))
}

/// Every maximal common run of at least `min_len` between `pred` and `truth`.
pub fn maximal_common_runs(pred: &[CandidateLabel], truth: &[CandidateLabel], min_len: usize) -> Vec<MatchedRun> {
    let mut runs = Vec::new();
    for p in 0..pred.len() {
        for t in 0..truth.len() {
            if pred[p] != truth[t] || (p > 0 && t > 0 && pred[p - 1] == truth[t - 1]) {
                continue;
            }
            let length = pred[p..].iter().zip(&truth[t..]).take_while(|(a, b)| a == b).count();
            if length >= min_len.max(1) {
                runs.push(MatchedRun { pred_start: p, truth_start: t, length });
            }
        }
    }
    runs
}

/// Continuity bonus `(gamma / K) * L_match` over offset runs.
///
/// Runs starting at the same index in both sequences are aligned and earn
/// nothing here (the token score already pays for them). Offset runs are
/// taken greedily by length, then by earliest prediction start, without
/// sharing prediction positions.
pub fn continuity_bonus<T: Scalar>(
    pred: &[CandidateLabel],
    truth: &[CandidateLabel],
    cfg: &RewardConfig<T>,
) -> Result<(T, Vec<MatchedRun>), RewardError> {
    let k = truth.len();
    if k == 0 {
        return Err(RewardError::EmptyTruth);
    }
    let pred = &pred[..pred.len().min(k)];
    let mut runs: Vec<MatchedRun> = maximal_common_runs(pred, truth, cfg.min_substring_len)
        .into_iter()
        .filter(|r| r.pred_start != r.truth_start)
        .collect();
    runs.sort_by(|a, b| {
        b.length.cmp(&a.length).then(a.pred_start.cmp(&b.pred_start)).then(a.truth_start.cmp(&b.truth_start))
    });

    let mut used = vec![false; pred.len()];
    let mut selected = Vec::new();
    for run in runs {
        let span = run.pred_start..run.pred_start + run.length;
        if used[span.clone()].iter().any(|&u| u) {
            continue;
        }
        used[span].iter_mut().for_each(|u| *u = true);
        selected.push(run);
    }
    selected.sort_by_key(|r| r.pred_start);

    let l_match: usize = selected.iter().map(|r| r.length).sum();
    Ok((cfg.gamma / T::of_usize(k) * T::of_usize(l_match), selected))
}

/// Correctness reward under the configured mode.
pub fn correctness_reward<T: Scalar>(
    pred: &[CandidateLabel],
    truth: &[CandidateLabel],
    cfg: &RewardConfig<T>,
) -> Result<CorrectnessBreakdown<T>, RewardError> {
    let (token, per_position) = token_score(pred, truth, cfg)?;
    let (bonus, matched_runs) = match cfg.mode {
        RewardMode::ContentPlusSequence => continuity_bonus(pred, truth, cfg)?,
        RewardMode::ExactOnly | RewardMode::ContentAware => (T::zero(), Vec::new()),
    };
    let length_mismatch =
        (pred.len() != truth.len()).then_some(LengthMismatch { predicted: pred.len(), expected: truth.len() });
    Ok(CorrectnessBreakdown {
        token_score: token,
        continuity_bonus: bonus,
        r_correct: token + bonus,
        per_position,
        matched_runs,
        length_mismatch,
    })
}

/// Mixes format and correctness: `beta * r_format + (1 - beta) * r_correct`.
pub fn combine<T: Scalar>(correctness: CorrectnessBreakdown<T>, format_ok: bool, cfg: &RewardConfig<T>) -> RewardBreakdown<T> {
    let r_format = u8::from(format_ok);
    let r_total = cfg.beta_fmt * T::of_usize(r_format as usize) + (T::one() - cfg.beta_fmt) * correctness.r_correct;
    RewardBreakdown { correctness, r_format, r_total }
}

/// Parses a raw response and computes the complete reward breakdown.
pub fn total_reward<T: Scalar>(
    raw_response: &str,
    truth: &[CandidateLabel],
    cfg: &RewardConfig<T>,
) -> Result<RewardBreakdown<T>, RewardError> {
    let parsed = parse_response(raw_response);
    let correctness = correctness_reward(&parsed.labels, truth, cfg)?;
    Ok(combine(correctness, parsed.format_ok, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Prediction;

    fn labels(s: &str) -> Vec<CandidateLabel> {
        Prediction::from_letters(s).unwrap().labels
    }

    fn cfg() -> RewardConfig<f64> {
        RewardConfig::default()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn parse_well_formed() {
        let p = parse_response("<think>frames show rising action</think><answer>[b,a,c]</answer>");
        assert!(p.format_ok);
        assert_eq!(p.labels, labels("bac"));
        assert_eq!(p.think.as_deref(), Some("frames show rising action"));
    }

    #[test]
    fn parse_sentence_answer_and_whitespace() {
        let p = parse_response("  <think>x</think>\n<answer>The answer is [ b , A ,c ]</answer>\n");
        assert!(p.format_ok);
        assert_eq!(p.labels, labels("bac"));
    }

    #[test]
    fn parse_without_tags() {
        let p = parse_response("[b,a,c]");
        assert!(!p.format_ok);
        assert_eq!(p.labels, labels("bac"));
    }

    #[test]
    fn parse_reversed_blocks() {
        let p = parse_response("<answer>[a]</answer><think>x</think>");
        assert!(!p.format_ok);
        assert_eq!(p.labels, labels("a"));
    }

    #[test]
    fn parse_rejects_repeats_and_trailing_text() {
        assert!(!parse_response("<think>a</think><think>b</think><answer>[a]</answer>").format_ok);
        assert!(!parse_response("<think>a</think><answer>[a]</answer> extra").format_ok);
        assert!(!parse_response("<think>a</think>junk<answer>[a]</answer>").format_ok);
        assert!(!parse_response("").format_ok);
    }

    #[test]
    fn parse_answer_without_list() {
        let p = parse_response("<think>hmm</think><answer>no idea</answer>");
        assert!(p.format_ok);
        assert!(p.labels.is_empty());
    }

    #[test]
    fn token_score_cases() {
        let (s, _) = token_score(&labels("bac"), &labels("bac"), &cfg()).unwrap();
        assert!(close(s, 3.0));
        let (s, v) = token_score(&labels("bca"), &labels("abc"), &cfg()).unwrap();
        assert!(close(s, 0.9));
        assert!(v.iter().all(|p| p.verdict == Verdict::Content));
        let (s, v) = token_score(&labels("def"), &labels("abc"), &cfg()).unwrap();
        assert_eq!(s, 0.0);
        assert!(v.iter().all(|p| p.verdict == Verdict::Miss));
        assert_eq!(token_score(&labels("a"), &[], &cfg()), Err(RewardError::EmptyTruth));
    }

    #[test]
    fn token_score_length_mismatch() {
        let (s, v) = token_score(&labels("a"), &labels("abc"), &cfg()).unwrap();
        assert!(close(s, 1.0));
        assert_eq!(v.len(), 1);
        let (s, v) = token_score(&labels("abcd"), &labels("abc"), &cfg()).unwrap();
        assert!(close(s, 3.0));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn duplicate_predictions_scored_per_position() {
        let (s, _) = token_score(&labels("bbb"), &labels("abc"), &cfg()).unwrap();
        assert!(close(s, 0.3 + 1.0 + 0.3));
        let dedup = RewardConfig { dedup_content: true, ..cfg() };
        let (s, _) = token_score(&labels("bbb"), &labels("abc"), &dedup).unwrap();
        assert!(close(s, 0.3 + 1.0));
    }

    #[test]
    fn continuity_cases() {
        let (b, runs) = continuity_bonus(&labels("bca"), &labels("abc"), &cfg()).unwrap();
        assert!(close(b, 0.6));
        assert_eq!(runs, vec![MatchedRun { pred_start: 0, truth_start: 1, length: 2 }]);
        let (b, runs) = continuity_bonus(&labels("abc"), &labels("abc"), &cfg()).unwrap();
        assert_eq!(b, 0.0);
        assert!(runs.is_empty());
        let (b, _) = continuity_bonus(&labels("xab"), &labels("abc"), &cfg()).unwrap();
        assert!(close(b, 0.6));
    }

    #[test]
    fn greedy_selection_prefers_longer_runs() {
        // truth abcd; pred bcdb: runs (0,1,3) "bcd" and (3,1,1) too short
        let (b, runs) = continuity_bonus(&labels("bcdb"), &labels("abcd"), &cfg()).unwrap();
        assert_eq!(runs, vec![MatchedRun { pred_start: 0, truth_start: 1, length: 3 }]);
        assert!(close(b, 0.9 / 4.0 * 3.0));
        // (1,0,3) "bab" and (0,1,2) "ab" share prediction position 1
        let (_, runs) = continuity_bonus(&labels("abab"), &labels("babc"), &cfg()).unwrap();
        assert_eq!(runs, vec![MatchedRun { pred_start: 1, truth_start: 0, length: 3 }]);
    }

    #[test]
    fn correctness_modes() {
        let pred = labels("bca");
        let truth = labels("abc");
        let full = correctness_reward(&pred, &truth, &cfg()).unwrap();
        assert!(close(full.token_score, 0.9));
        assert!(close(full.continuity_bonus, 0.6));
        assert!(close(full.r_correct, 1.5));
        let exact = correctness_reward(&pred, &truth, &RewardConfig::<f64>::with_mode(RewardMode::ExactOnly)).unwrap();
        assert_eq!(exact.r_correct, 0.0);
        let content = correctness_reward(&pred, &truth, &RewardConfig::<f64>::with_mode(RewardMode::ContentAware)).unwrap();
        assert!(close(content.r_correct, 0.9));
        for mode in RewardMode::ALL {
            let r = correctness_reward(&truth, &truth, &RewardConfig::<f64>::with_mode(mode)).unwrap();
            assert!(close(r.r_correct, 3.0));
        }
    }

    #[test]
    fn total_reward_cases() {
        let truth = labels("bac");
        let r = total_reward("<think>t</think><answer>[b,a,c]</answer>", &truth, &cfg()).unwrap();
        assert!(close(r.r_total, 2.8));
        let r = total_reward("<think>t</think><answer>[d,e,f]</answer>", &truth, &cfg()).unwrap();
        assert!(close(r.r_total, 0.1));
        let r = total_reward("[b,a,c]", &truth, &cfg()).unwrap();
        assert!(close(r.r_total, 2.7));
        assert_eq!(r.r_format, 0);
        assert_eq!(total_reward("x", &[], &cfg()), Err(RewardError::EmptyTruth));
    }

    #[test]
    fn f32_scoring() {
        let c = RewardConfig::<f32>::default();
        let r = correctness_reward(&labels("bca"), &labels("abc"), &c).unwrap();
        assert!((r.r_correct - 1.5).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(RewardConfig { alpha: 0.5, ..cfg() }.validate().is_err());
        assert!(RewardConfig { beta_fmt: 1.5, ..cfg() }.validate().is_err());
        assert!(RewardConfig { gamma: 0.0, ..cfg() }.validate().is_err());
        assert_eq!("exact_only".parse::<RewardMode>().unwrap(), RewardMode::ExactOnly);
    }

    #[test]
    fn breakdown_json_is_flat() {
        let r = total_reward("[b,a,c]", &labels("bac"), &cfg()).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["token_score", "continuity_bonus", "r_correct", "r_format", "r_total", "per_position", "matched_runs"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
