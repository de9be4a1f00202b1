//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use mvp_core::fixtures;
use mvp_core::grpo::{self, DifferentiablePolicy, GrpoConfig};
use mvp_core::policy_sim::{evaluate, train_sim, ScriptedKind, ScriptedPolicy, TrainOptions};
use mvp_core::reward::{self, RewardConfig, RewardMode};
use mvp_core::synthesis::{self, SynthesisConfig};
use mvp_core::types::{write_jsonl, MvpSample};
use mvp_core::verify;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn mode_cfg(mode: RewardMode) -> RewardConfig<f64> {
    RewardConfig::with_mode(mode)
}

fn reward_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let cfg = RewardConfig::<f64>::default();
    let mut pairs = 0usize;
    let mut worst = 0.0f64;
    for pool in 1..=7 {
        for k in 1..=4.min(pool) {
            let seqs = duplicate_free_sequences(pool, k);
            for truth in &seqs {
                for pred in &seqs {
                    let fast = reward::correctness_reward(pred, truth, &cfg).map_err(|e| e.to_string())?.r_correct;
                    let slow = oracle_r_correct(pred, truth, Mode::ContentSequence);
                    worst = worst.max((fast - slow).abs());
                    pairs += 1;
                    ensure(worst <= 1e-9, || format!("pool {pool} pred {pred:?} truth {truth:?}: {fast} vs {slow}"))?;
                }
            }
        }
    }
    within(started.elapsed(), 60)?;
    Ok(format!("{pairs} pairs, max |diff| {worst:.1e}, {:.1}s", started.elapsed().as_secs_f64()))
}

fn hand_fixtures() -> Outcome {
    let cfg = RewardConfig::<f64>::default();
    let b = reward::correctness_reward(&labels("bca"), &labels("abc"), &cfg).map_err(|e| e.to_string())?;
    ensure((b.token_score - 0.9).abs() < 1e-12, || format!("S_token {}", b.token_score))?;
    ensure((b.continuity_bonus - 0.6).abs() < 1e-12, || format!("bonus {}", b.continuity_bonus))?;
    ensure((b.r_correct - 1.5).abs() < 1e-12, || format!("r_correct {}", b.r_correct))?;
    let same = reward::correctness_reward(&labels("abc"), &labels("abc"), &cfg).map_err(|e| e.to_string())?;
    ensure((same.r_correct - 3.0).abs() < 1e-12 && same.continuity_bonus == 0.0, || format!("identity {same:?}"))?;

    let good = "<think>ordering the frames</think><answer>The answer is [a,b,c]</answer>";
    let t = reward::total_reward(good, &labels("abc"), &cfg).map_err(|e| e.to_string())?;
    ensure((t.r_total - (0.1 + 0.9 * 3.0)).abs() < 1e-12, || format!("formatted perfect r_total {}", t.r_total))?;
    let bare = reward::total_reward("The answer is [a,b,c]", &labels("abc"), &cfg).map_err(|e| e.to_string())?;
    ensure(bare.r_format == 0 && (bare.r_total - 2.7).abs() < 1e-12, || format!("unformatted perfect r_total {}", bare.r_total))?;
    Ok("[b,c,a] vs [a,b,c] = 0.9 + 0.6 = 1.5; identity 3.0; r_total 2.8 / 2.7".into())
}

fn mode_ordering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2718);
    let modes = [RewardMode::ExactOnly, RewardMode::ContentAware, RewardMode::ContentPlusSequence];
    let mut strict = [0usize; 2];
    for i in 0..1000 {
        let pool = rng.gen_range(2..=7);
        let k = rng.gen_range(2..=4.min(pool));
        let seqs = duplicate_free_sequences(pool, k);
        let truth = &seqs[rng.gen_range(0..seqs.len())];
        let pred = &seqs[rng.gen_range(0..seqs.len())];
        let r: Vec<f64> = modes
            .iter()
            .map(|&m| reward::correctness_reward(pred, truth, &mode_cfg(m)).map(|b| b.r_correct))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for j in 0..2 {
            ensure(r[j] <= r[j + 1], || format!("pair {i}: {pred:?} vs {truth:?} gives {r:?}"))?;
            if r[j] < r[j + 1] {
                strict[j] += 1;
            }
        }
    }
    ensure(strict.iter().all(|&c| c > 0), || format!("strict counts {strict:?}"))?;
    Ok(format!("1000 pairs ordered; strict exact<content {}, content<sequence {}", strict[0], strict[1]))
}

/// `J` recomputed from the policy's log-probabilities with plain loops.
fn naive_batch_objective(policy: &mvp_core::SoftmaxPolicyF64, batch: &[mvp_core::RolloutGroupF64], cfg: &GrpoConfig) -> f64 {
    let mut total = 0.0;
    for g in batch {
        let mut j = 0.0;
        for o in &g.outputs {
            let lp = policy.logprob(g.query, o.action).unwrap();
            let rho = (lp - o.logprob_old).exp();
            let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            let surrogate = (rho * o.advantage).min(clipped * o.advantage);
            let d = o.logprob_ref - lp;
            j += surrogate - cfg.kl_coeff * (d.exp() - d - 1.0);
        }
        total += j / g.outputs.len() as f64;
    }
    total / batch.len() as f64
}

fn gradient_check() -> Outcome {
    let started = Instant::now();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let (policy, batch, cfg) = verify::random_policy_batch(seed);
        ensure(policy.params().len() <= 64, || format!("seed {seed}: {} parameters", policy.params().len()))?;
        let j = grpo::batch_objective(&policy, &batch, &cfg).map_err(|e| e.to_string())?;
        let naive = naive_batch_objective(&policy, &batch, &cfg);
        ensure((j - naive).abs() < 1e-12, || format!("seed {seed}: objective {j} vs {naive}"))?;

        let analytic = grpo::objective_gradient(&policy, &batch, &cfg).map_err(|e| e.to_string())?;
        let mut probe = policy.clone();
        for i in 0..analytic.len() {
            let base = probe.params()[i];
            probe.params_mut()[i] = base + h;
            let up = naive_batch_objective(&probe, &batch, &cfg);
            probe.params_mut()[i] = base - h;
            let down = naive_batch_objective(&probe, &batch, &cfg);
            probe.params_mut()[i] = base;
            let numeric = (up - down) / (2.0 * h);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            ensure(rel < 1e-4, || format!("seed {seed} param {i}: analytic {} numeric {numeric}", analytic[i]))?;
        }
    }
    within(started.elapsed(), 30)?;
    Ok(format!("100 seeds, max relative error {worst:.1e}, {:.1}s", started.elapsed().as_secs_f64()))
}

fn advantage_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let eps = 1e-6;
    let fixed = [0.1, 0.9, 2.8, 0.1, 1.5];
    let (m, s) = mean_std(&fixed);
    let adv = grpo::compute_advantages(&fixed, eps).map_err(|e| e.to_string())?;
    for (a, r) in adv.iter().zip(fixed) {
        ensure((a - (r - m) / (s + eps)).abs() < 1e-12, || format!("fixed group: {adv:?}"))?;
    }
    let mut worst_mean = 0.0f64;
    let mut worst_shift = 0.0f64;
    for i in 0..10_000 {
        let rewards: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..3.0)).collect();
        let adv = grpo::compute_advantages(&rewards, eps).map_err(|e| e.to_string())?;
        let (am, asd) = mean_std(&adv);
        let (_, rs) = mean_std(&rewards);
        worst_mean = worst_mean.max(am.abs());
        ensure(am.abs() < 1e-9, || format!("group {i}: mean {am:e}"))?;
        ensure((asd - rs / (rs + eps)).abs() < 1e-9, || format!("group {i}: std {asd}"))?;
        let c = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
        let adv2 = grpo::compute_advantages(&shifted, eps).map_err(|e| e.to_string())?;
        let d = adv.iter().zip(&adv2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_shift = worst_shift.max(d);
        ensure(d < 1e-9, || format!("group {i}: shift {c} moved advantages by {d:e}"))?;
    }
    Ok(format!("10000 groups, max |mean| {worst_mean:.1e}, max shift change {worst_shift:.1e}"))
}

fn training_convergence() -> Outcome {
    let grpo_cfg = GrpoConfig::default();
    let reward_cfg = RewardConfig::<f64>::default();
    let mut converged = 0;
    let mut first_hits = Vec::new();
    let mut min_rho = f64::INFINITY;
    for seed in 0..20u64 {
        let corpus = fixtures::toy_corpus(5, 3, 6, 1000 + seed);
        let out = train_sim(&corpus, &grpo_cfg, &reward_cfg, 300, seed, &TrainOptions::default()).map_err(|e| e.to_string())?;
        // expected r_correct of the final policy, scored by the oracle
        let mut final_expected = 0.0;
        for (q, sample) in corpus.iter().enumerate() {
            let space = out.policy.action_space(q);
            let probs = out.policy.probabilities(q);
            final_expected += space
                .iter()
                .zip(&probs)
                .map(|(seq, p)| p * oracle_r_correct(seq, &sample.answer, Mode::ContentSequence))
                .sum::<f64>();
        }
        final_expected /= corpus.len() as f64;
        if final_expected >= 0.9 * ALPHA {
            converged += 1;
        }
        first_hits.push(out.steps_to_threshold(0.9 * ALPHA).map_or(-1, |s| s as i64));
        let steps: Vec<f64> = out.log.iter().map(|l| l.step as f64).collect();
        let rewards: Vec<f64> = out.log.iter().map(|l| l.mean_r_correct).collect();
        let rho = spearman(&steps, &rewards);
        min_rho = min_rho.min(rho);
        ensure(rho > 0.0, || format!("seed {seed}: Spearman {rho}"))?;
    }
    ensure(converged >= 18, || format!("{converged}/20 seeds converged; first hits {first_hits:?}"))?;
    Ok(format!("{converged}/20 seeds end >= 2.7; first hits {first_hits:?}; min Spearman {min_rho:.3}"))
}

fn selected_frames(sample: &MvpSample) -> Vec<u32> {
    let mut frames: Vec<u32> = sample.context.iter().map(|f| f.frame_index).collect();
    frames.extend(sample.target_frames().iter().map(|f| f.frame_index));
    frames.sort_unstable();
    frames
}

fn synthesis_determinism() -> Outcome {
    let inputs = fixtures::synthetic_corpus(12, 120, 16, 5);
    let config = SynthesisConfig { rng_seed: 2024, pool_size: 6, kappa: 0.95, ..Default::default() };
    let targets = BTreeMap::from([(2, 20), (3, 50), (4, 30)]);
    let run = || -> Result<Vec<u8>, String> {
        let (samples, _) = synthesis::synthesize_corpus(&inputs, &config, &targets, None).map_err(|e| e.to_string())?;
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &samples).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "JSONL differs between runs".into())?;
    let samples = mvp_core::types::read_jsonl(a.as_slice()).map_err(|e| e.to_string())?;

    let by_id: BTreeMap<&str, &mvp_core::EmbeddingSequenceF32> = inputs.iter().map(|v| (v.video_id.as_str(), v)).collect();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut max_sim = f64::MIN;
    for s in &samples {
        *histogram.entry(s.answer.len()).or_default() += 1;
        ensure(s.candidates.len() == 6, || format!("{}: {} candidates", s.sample_id, s.candidates.len()))?;
        let video = by_id[s.context[0].video_id.as_str()];
        let vector = |idx: u32| &video.frames.iter().find(|f| f.frame_index == idx).expect("frame exists").vector;
        for w in selected_frames(s).windows(2) {
            let sim = cosine(vector(w[0]), vector(w[1]));
            max_sim = max_sim.max(sim);
            ensure(sim <= 0.95, || format!("{}: frames {w:?} similarity {sim}", s.sample_id))?;
        }
        let times: Vec<f64> = s.target_frames().iter().map(|f| f.timestamp_s).collect();
        ensure(times.windows(2).all(|w| w[0] < w[1]), || format!("{}: answer times {times:?}", s.sample_id))?;
    }
    ensure(histogram == targets, || format!("mask counts {histogram:?}"))?;
    Ok(format!("{} samples byte-identical; counts {histogram:?}; max consecutive similarity {max_sim:.3}", samples.len()))
}

fn evaluator_sanity() -> Outcome {
    let cfg = RewardConfig::<f64>::default();
    let small = fixtures::toy_corpus(200, 3, 6, 11);
    let oracle = evaluate::<f64, _>(&ScriptedPolicy::oracle(), &small, &cfg, 0).map_err(|e| e.to_string())?;
    ensure(oracle.avg_accuracy == 1.0 && oracle.avg_format_rate == 1.0, || {
        format!("oracle accuracy {} format {}", oracle.avg_accuracy, oracle.avg_format_rate)
    })?;

    // fixed points of a uniform permutation of 3: (3 + 1 + 1 + 1 + 0 + 0) / 6 / 3
    let expected: f64 = duplicate_free_sequences(3, 3)
        .iter()
        .map(|p| p.iter().enumerate().filter(|(i, l)| l.index() == *i).count() as f64 / 3.0)
        .sum::<f64>()
        / 6.0;
    let big = fixtures::toy_corpus(10_000, 3, 6, 12);
    let content = ScriptedPolicy::new(ScriptedKind::ContentOnly, 1.0);
    let report = evaluate::<f64, _>(&content, &big, &cfg, 1).map_err(|e| e.to_string())?;
    ensure((report.avg_accuracy - expected).abs() <= 0.02, || format!("content_only accuracy {}", report.avg_accuracy))?;

    let random = ScriptedPolicy::new(ScriptedKind::Random, 0.74);
    let fmt = evaluate::<f64, _>(&random, &big, &cfg, 2).map_err(|e| e.to_string())?;
    ensure((fmt.avg_format_rate - 0.74).abs() <= 0.02, || format!("format rate {}", fmt.avg_format_rate))?;
    Ok(format!(
        "oracle 1.0/1.0; content_only accuracy {:.4} (expected {expected:.4}); random format rate {:.4}",
        report.avg_accuracy, fmt.avg_format_rate
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("reward oracle equivalence", reward_oracle_equivalence),
        ("hand-anchored fixtures", hand_fixtures),
        ("reward mode ordering", mode_ordering),
        ("GRPO gradient check", gradient_check),
        ("advantage normalization", advantage_normalization),
        ("simulated training convergence", training_convergence),
        ("synthesis determinism and constraints", synthesis_determinism),
        ("evaluator sanity", evaluator_sanity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
