//! Self-check suites comparing the fast paths against brute-force references.
//!
//! The reference scorers here are deliberately naive: they enumerate every
//! substring instead of extending runs, and recompute everything from
//! scratch. They exist so a built binary can check itself (`verify`).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fixtures;
use crate::grpo::{self, DifferentiablePolicy, GrpoConfig, Rollout, RolloutGroup};
use crate::policy_sim::{ActionSpace, Parameterization, SoftmaxSequencePolicy};
use crate::reward::{self, RewardConfig, RewardMode};
use crate::synthesis::{self, EmbeddingSequence, SynthesisConfig};
use crate::types::{validate_sample, write_jsonl, CandidateLabel};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteReport {
    pub suite: String,
    pub checked: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        Self { suite: suite.to_string(), ..Default::default() }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.checked += 1;
        if !ok && self.failures.len() < 20 {
            self.failures.push(what());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Naive correctness reward: per-position scoring plus every maximal
/// offset substring found by exhaustive enumeration.
pub fn reference_r_correct(pred: &[CandidateLabel], truth: &[CandidateLabel], cfg: &RewardConfig<f64>) -> f64 {
    let k = truth.len();
    let pred: Vec<CandidateLabel> = pred.iter().take(k).copied().collect();
    let mut token = 0.0;
    for i in 0..pred.len() {
        if pred[i] == truth[i] {
            token += cfg.alpha / k as f64;
        } else if cfg.mode != RewardMode::ExactOnly && truth.iter().enumerate().any(|(j, &t)| j != i && t == pred[i]) {
            token += cfg.gamma / k as f64;
        }
    }
    if cfg.mode != RewardMode::ContentPlusSequence {
        return token;
    }

    // (len, p, t) for every common substring that cannot grow on either side
    let mut runs = Vec::new();
    for p in 0..pred.len() {
        for t in 0..k {
            for len in cfg.min_substring_len..=pred.len().min(k) {
                if p + len > pred.len() || t + len > k || pred[p..p + len] != truth[t..t + len] {
                    continue;
                }
                let grows_left = p > 0 && t > 0 && pred[p - 1] == truth[t - 1];
                let grows_right = p + len < pred.len() && t + len < k && pred[p + len] == truth[t + len];
                if !grows_left && !grows_right && p != t {
                    runs.push((len, p, t));
                }
            }
        }
    }
    let mut taken = vec![false; pred.len()];
    let mut chosen = vec![false; runs.len()];
    let mut l_match = 0;
    loop {
        let mut best: Option<usize> = None;
        for (i, &(len, p, t)) in runs.iter().enumerate() {
            if chosen[i] || taken[p..p + len].iter().any(|&x| x) {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let (bl, bp, bt) = runs[b];
                    len > bl || (len == bl && (p < bp || (p == bp && t < bt)))
                }
            };
            if better {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        chosen[b] = true;
        let (len, p, _) = runs[b];
        taken[p..p + len].iter_mut().for_each(|x| *x = true);
        l_match += len;
    }
    token + cfg.gamma / k as f64 * l_match as f64
}

/// Exhaustive comparison over every (prediction, truth) pair of
/// duplicate-free sequences, pools up to `max_pool`, K up to `max_k`.
pub fn reward_suite(max_pool: usize, max_k: usize) -> SuiteReport {
    let mut report = SuiteReport::new("reward");
    let cfg = RewardConfig::<f64>::default();
    for pool in 1..=max_pool {
        for k in 1..=max_k.min(pool) {
            let space = ActionSpace::new(pool, k).expect("small space");
            for truth in space.iter() {
                for pred in space.iter() {
                    let fast = reward::correctness_reward(pred, truth, &cfg).expect("non-empty truth").r_correct;
                    let slow = reference_r_correct(pred, truth, &cfg);
                    report.check((fast - slow).abs() <= 1e-9, || format!("pool {pool} pred {pred:?} truth {truth:?}: {fast} vs {slow}"));
                }
            }
            // pred = truth is the unique maximum
            let truth = space.sequence(0).expect("non-empty");
            let best = reward::correctness_reward(truth, truth, &cfg).expect("ok").r_correct;
            for pred in space.iter().filter(|p| *p != truth) {
                let r = reward::correctness_reward(pred, truth, &cfg).expect("ok").r_correct;
                report.check(r < best, || format!("pool {pool}: {pred:?} scores {r} >= exact {best}"));
            }
        }
    }
    // mode ordering on random pairs, duplicates allowed
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let modes = RewardMode::ALL.map(RewardConfig::<f64>::with_mode);
    for _ in 0..1000 {
        let pool = rng.gen_range(2..=7);
        let k = rng.gen_range(1..=4.min(pool));
        let space = ActionSpace::new(pool, k).expect("small space");
        let truth = space.sequence(rng.gen_range(0..space.len())).expect("in range");
        let len = rng.gen_range(0..=k + 1);
        let pred: Vec<CandidateLabel> =
            (0..len).map(|_| CandidateLabel::from_index(rng.gen_range(0..pool)).expect("in alphabet")).collect();
        let scores: Vec<f64> = modes.iter().map(|c| reward::correctness_reward(&pred, truth, c).expect("ok").r_correct).collect();
        report.check(scores[0] <= scores[1] && scores[1] <= scores[2], || format!("mode order {pred:?} {truth:?}: {scores:?}"));
    }
    report
}

/// Central finite-difference gradient of the batch objective.
pub fn finite_difference_gradient(
    policy: &SoftmaxSequencePolicy<f64>,
    batch: &[RolloutGroup<f64>],
    cfg: &GrpoConfig<f64>,
    h: f64,
) -> Vec<f64> {
    let mut probe = policy.clone();
    (0..policy.params().len())
        .map(|i| {
            let base = probe.params()[i];
            probe.params_mut()[i] = base + h;
            let up = grpo::batch_objective(&probe, batch, cfg).expect("finite");
            probe.params_mut()[i] = base - h;
            let down = grpo::batch_objective(&probe, batch, cfg).expect("finite");
            probe.params_mut()[i] = base;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Random small softmax policy with an off-policy batch. Even seeds use the
/// tabular parameterization, odd seeds the position-label one.
pub fn random_policy_batch(seed: u64) -> (SoftmaxSequencePolicy<f64>, Vec<RolloutGroup<f64>>, GrpoConfig<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (pool, k) shapes with at most 64 parameters in total
    let shapes = [(3, 2), (4, 2), (3, 1), (5, 2), (4, 1), (6, 1)];
    let queries = rng.gen_range(1..=3);
    let mut corpus = Vec::new();
    let mut total = 0;
    for q in 0..queries {
        let (pool, k) = shapes[rng.gen_range(0..shapes.len())];
        let size = ActionSpace::new(pool, k).expect("small").len();
        if total + size > 64 {
            break;
        }
        total += size;
        corpus.push(fixtures::toy_sample(&format!("q{q}"), k, pool, rng.gen()));
    }
    let temperature = rng.gen_range(0.5..1.5);
    let parameterization = if seed % 2 == 0 { Parameterization::Tabular } else { Parameterization::PositionLabel };
    let mut policy = SoftmaxSequencePolicy::with_parameterization(&corpus, temperature, parameterization).expect("valid corpus");
    let mut reference = policy.clone();
    for x in policy.params_mut() {
        *x = rng.gen_range(-1.5..1.5);
    }
    for x in reference.params_mut() {
        *x = rng.gen_range(-1.5..1.5);
    }
    let cfg = GrpoConfig {
        group_size_g: 5,
        clip_eps: rng.gen_range(0.1..0.3),
        kl_coeff: rng.gen_range(0.0..0.5),
        adv_eps: 1e-6,
        learning_rate: 0.1,
        temperature,
    };
    let batch = (0..policy.num_queries())
        .map(|q| {
            let n_actions = policy.action_space(q).len();
            let outputs: Vec<Rollout<f64>> = (0..cfg.group_size_g)
                .map(|_| {
                    let action = rng.gen_range(0..n_actions);
                    let lp = policy.logprob(q, action).expect("in range");
                    Rollout {
                        action,
                        response: String::new(),
                        logprob_old: lp + rng.gen_range(-0.4..0.4),
                        logprob_ref: reference.logprob(q, action).expect("in range"),
                        reward: rng.gen_range(0.0..3.0),
                        advantage: 0.0,
                    }
                })
                .collect();
            let mut group = RolloutGroup { query: q, query_id: policy.query_id(q).to_string(), outputs };
            group.assign_advantages(cfg.adv_eps).expect("G >= 2");
            group
        })
        .collect();
    (policy, batch, cfg)
}

/// Largest relative error between two gradients, with a `1e-6` floor on the scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn grpo_suite(seeds: u64) -> SuiteReport {
    let mut report = SuiteReport::new("grpo");
    for seed in 0..seeds {
        let (policy, batch, cfg) = random_policy_batch(seed);
        let analytic = grpo::objective_gradient(&policy, &batch, &cfg).expect("finite");
        let numeric = finite_difference_gradient(&policy, &batch, &cfg, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        report.check(err < 1e-4, || format!("seed {seed}: gradient relative error {err:e}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for i in 0..10_000 {
        let rewards: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let adv = grpo::compute_advantages(&rewards, 1e-6).expect("G = 5");
        let mean = adv.iter().sum::<f64>() / 5.0;
        report.check(mean.abs() < 1e-9, || format!("group {i}: mean advantage {mean:e}"));
        let shift = rng.gen_range(-10.0..10.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let adv2 = grpo::compute_advantages(&shifted, 1e-6).expect("G = 5");
        let diff = adv.iter().zip(&adv2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        report.check(diff < 1e-9, || format!("group {i}: shift changed advantages by {diff:e}"));
    }
    report
}

/// Straightforward re-scan reference for de-duplicated selection, in `f64`.
pub fn reference_selection(seq: &EmbeddingSequence<f32>, start: usize, n: usize, kappa: f64) -> Vec<usize> {
    let mut chosen = vec![start];
    let mut next = start + 1;
    while chosen.len() < n && next < seq.frames.len() {
        let last = &seq.frames[*chosen.last().expect("non-empty")].vector;
        let dot: f64 = last.iter().zip(&seq.frames[next].vector).map(|(&a, &b)| a as f64 * b as f64).sum();
        if dot <= kappa {
            chosen.push(next);
        }
        next += 1;
    }
    chosen
}

pub fn synthesis_suite() -> SuiteReport {
    let mut report = SuiteReport::new("synthesis");
    for seed in 0..20 {
        let (seq, fresh) = fixtures::planted_duplicates(15, 3, 32, seed);
        let fast: Vec<usize> = synthesis::select_positions(&seq, 0, 15, 0.95f32).unwrap_or_default();
        let slow = reference_selection(&seq, 0, 15, 0.95);
        report.check(fast == slow && fast == fresh, || format!("planted seed {seed}: {fast:?} vs {slow:?}"));
    }

    let inputs = fixtures::synthetic_corpus(12, 120, 16, 5);
    let config = SynthesisConfig { rng_seed: 2024, ..Default::default() };
    let targets = BTreeMap::from([(2, 20), (3, 50), (4, 30)]);
    let run = || synthesis::synthesize_corpus(&inputs, &config, &targets, None);
    match (run(), run()) {
        (Ok((a, report_a)), Ok((b, _))) => {
            let bytes = |s: &[crate::types::MvpSample]| {
                let mut buf = Vec::new();
                write_jsonl(&mut buf, s).expect("in-memory write");
                buf
            };
            report.check(bytes(&a) == bytes(&b), || "corpus bytes differ between runs".into());
            report.check(report_a.achieved == targets, || format!("achieved {:?}", report_a.achieved));
            for s in &a {
                report.check(validate_sample(s).is_empty(), || format!("{}: {:?}", s.sample_id, validate_sample(s)));
                report.check(s.candidates.len() == 6, || format!("{}: pool {}", s.sample_id, s.candidates.len()));
            }
        }
        (Err(e), _) | (_, Err(e)) => report.check(false, || format!("synthesis failed: {e}")),
    }
    report
}

/// Runs the named suite (`reward`, `grpo`, `synthesis` or `all`).
pub fn run_suite(name: &str) -> Option<Vec<SuiteReport>> {
    Some(match name {
        "reward" => vec![reward_suite(7, 4)],
        "grpo" => vec![grpo_suite(100)],
        "synthesis" => vec![synthesis_suite()],
        "all" => vec![reward_suite(7, 4), grpo_suite(100), synthesis_suite()],
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_reward_suite_passes() {
        let r = reward_suite(4, 3);
        assert!(r.passed(), "{:?}", r.failures);
        assert!(r.checked > 1000);
    }

    #[test]
    fn small_grpo_suite_passes() {
        let r = grpo_suite(5);
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn reference_scorer_matches_hand_values() {
        let cfg = RewardConfig::default();
        let l = |s: &str| crate::types::Prediction::from_letters(s).unwrap().labels;
        assert!((reference_r_correct(&l("bca"), &l("abc"), &cfg) - 1.5).abs() < 1e-12);
        assert!((reference_r_correct(&l("abc"), &l("abc"), &cfg) - 3.0).abs() < 1e-12);
        assert!((reference_r_correct(&l("xab"), &l("abc"), &cfg) - 1.2).abs() < 1e-12);
    }
}
