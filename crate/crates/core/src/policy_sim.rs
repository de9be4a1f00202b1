//! Small policies standing in for a video language model.
//!
//! [`SoftmaxSequencePolicy`] keeps one logit per ordered, duplicate-free
//! answer sequence of each query, which makes it exactly differentiable and
//! cheap enough to train with GRPO in milliseconds. [`ScriptedPolicy`]
//! produces fixed-skill answers for measuring the evaluator and filter.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grpo::{self, DifferentiablePolicy, GrpoConfig, GrpoError, Rollout, RolloutGroup};
use crate::reward::{self, RewardConfig, RewardError};
use crate::scalar::{log_sum_exp, Scalar};
use crate::synthesis::RolloutScorer;
use crate::types::{format_label_list, CandidateLabel, MvpSample};

/// Largest action space a softmax policy will enumerate per query.
pub const MAX_ACTIONS: usize = 5040;

/// Action index recorded for responses outside a policy's action space.
pub const NO_ACTION: usize = usize::MAX;

/// Fixed reasoning text placed in simulated responses.
pub const THINK_TEMPLATE: &str = "Comparing the context before and after the gap with each candidate frame.";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("action space mismatch: {0}")]
    ActionSpace(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("step {step} diverged: {source}")]
    Diverged { step: usize, source: GrpoError },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
}

/// All ordered sequences of `k` distinct labels from a pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    pub pool_size: usize,
    pub k: usize,
    sequences: Vec<Vec<CandidateLabel>>,
    lookup: HashMap<Vec<CandidateLabel>, usize>,
}

impl ActionSpace {
    pub fn new(pool_size: usize, k: usize) -> Result<Self, SimError> {
        if k == 0 || k > pool_size {
            return Err(SimError::ActionSpace(format!("cannot choose {k} of {pool_size}")));
        }
        let size: usize = (pool_size - k + 1..=pool_size).product();
        if size > MAX_ACTIONS {
            return Err(SimError::ActionSpace(format!("{size} actions exceeds the limit of {MAX_ACTIONS}")));
        }
        let labels: Vec<CandidateLabel> = (0..pool_size)
            .map(CandidateLabel::from_index)
            .collect::<Result<_, _>>()
            .map_err(|e| SimError::ActionSpace(e.to_string()))?;
        let mut sequences = Vec::with_capacity(size);
        let mut current = Vec::with_capacity(k);
        fn extend(labels: &[CandidateLabel], k: usize, current: &mut Vec<CandidateLabel>, out: &mut Vec<Vec<CandidateLabel>>) {
            if current.len() == k {
                out.push(current.clone());
                return;
            }
            for &l in labels {
                if !current.contains(&l) {
                    current.push(l);
                    extend(labels, k, current, out);
                    current.pop();
                }
            }
        }
        extend(&labels, k, &mut current, &mut sequences);
        let lookup = sequences.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self { pool_size, k, sequences, lookup })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence(&self, action: usize) -> Option<&[CandidateLabel]> {
        self.sequences.get(action).map(Vec::as_slice)
    }

    pub fn index_of(&self, labels: &[CandidateLabel]) -> Option<usize> {
        self.lookup.get(labels).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[CandidateLabel]> {
        self.sequences.iter().map(Vec::as_slice)
    }
}

/// Renders a simulated response; malformed responses omit the tags.
pub fn render_response(labels: &[CandidateLabel], well_formed: bool) -> String {
    let list = format_label_list(labels);
    if well_formed {
        format!("<think>{THINK_TEMPLATE}</think><answer>The answer is {list}</answer>")
    } else {
        format!("The answer is {list}")
    }
}

/// One generated answer.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse<T> {
    pub labels: Vec<CandidateLabel>,
    pub text: String,
    /// Index into the policy's action space, or [`NO_ACTION`].
    pub action: usize,
    /// Log-probability under a differentiable policy.
    pub logprob: Option<T>,
}

/// Anything that answers samples.
pub trait ResponsePolicy<T: Scalar>: Sync {
    fn respond(&self, sample: &MvpSample, rng: &mut ChaCha8Rng) -> Result<SampledResponse<T>, SimError>;
}

#[derive(Debug, Clone)]
struct QuerySlot {
    offset: usize,
    width: usize,
    space: Arc<ActionSpace>,
}

/// How a query's sequence logits are built from the parameter vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// One free logit per sequence.
    Tabular,
    /// The logit of a sequence is the sum of one score per (position, label)
    /// pair, so sequences sharing a label at a position share parameters.
    #[default]
    PositionLabel,
}

impl Parameterization {
    fn width(self, space: &ActionSpace) -> usize {
        match self {
            Self::Tabular => space.len(),
            Self::PositionLabel => space.k * space.pool_size,
        }
    }
}

impl std::str::FromStr for Parameterization {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tabular" => Ok(Self::Tabular),
            "position_label" => Ok(Self::PositionLabel),
            other => Err(SimError::InvalidPolicy(format!("unknown parameterization {other:?}"))),
        }
    }
}

/// Softmax over the duplicate-free answer sequences of each query.
///
/// Action probabilities are `softmax(logits / temperature)`; a temperature
/// of zero selects the argmax deterministically.
#[derive(Debug, Clone)]
pub struct SoftmaxSequencePolicy<T = f64> {
    query_ids: Vec<String>,
    index: HashMap<String, usize>,
    slots: Vec<QuerySlot>,
    params: Vec<T>,
    parameterization: Parameterization,
    pub temperature: T,
}

/// Serializable form of a [`SoftmaxSequencePolicy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot<T = f64> {
    pub query_ids: Vec<String>,
    pub pool_sizes: Vec<usize>,
    pub mask_counts: Vec<usize>,
    #[serde(default)]
    pub parameterization: Parameterization,
    pub temperature: T,
    pub params: Vec<T>,
}

impl<T: Scalar> SoftmaxSequencePolicy<T> {
    /// Uniform policy over every query of `corpus`.
    pub fn new(corpus: &[MvpSample], temperature: T) -> Result<Self, SimError> {
        Self::with_parameterization(corpus, temperature, Parameterization::default())
    }

    pub fn with_parameterization(corpus: &[MvpSample], temperature: T, parameterization: Parameterization) -> Result<Self, SimError> {
        let shapes: Vec<(String, usize, usize)> =
            corpus.iter().map(|s| (s.sample_id.clone(), s.pool_size(), s.mask_count)).collect();
        Self::from_shapes(&shapes, temperature, parameterization)
    }

    fn from_shapes(shapes: &[(String, usize, usize)], temperature: T, parameterization: Parameterization) -> Result<Self, SimError> {
        if shapes.is_empty() {
            return Err(SimError::EmptyCorpus);
        }
        let mut spaces: HashMap<(usize, usize), Arc<ActionSpace>> = HashMap::new();
        let mut slots = Vec::with_capacity(shapes.len());
        let mut index = HashMap::new();
        let mut offset = 0;
        for (q, (id, pool, k)) in shapes.iter().enumerate() {
            if index.insert(id.clone(), q).is_some() {
                return Err(SimError::InvalidPolicy(format!("duplicate query id {id}")));
            }
            let space = match spaces.get(&(*pool, *k)) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(ActionSpace::new(*pool, *k)?);
                    spaces.insert((*pool, *k), s.clone());
                    s
                }
            };
            let width = parameterization.width(&space);
            slots.push(QuerySlot { offset, width, space });
            offset += width;
        }
        Ok(Self {
            query_ids: shapes.iter().map(|(id, _, _)| id.clone()).collect(),
            index,
            slots,
            params: vec![T::zero(); offset],
            parameterization,
            temperature,
        })
    }

    pub fn from_snapshot(snapshot: PolicySnapshot<T>) -> Result<Self, SimError> {
        let n = snapshot.query_ids.len();
        if snapshot.pool_sizes.len() != n || snapshot.mask_counts.len() != n {
            return Err(SimError::InvalidPolicy("snapshot field lengths differ".into()));
        }
        let shapes: Vec<(String, usize, usize)> = snapshot
            .query_ids
            .into_iter()
            .zip(snapshot.pool_sizes)
            .zip(snapshot.mask_counts)
            .map(|((id, p), k)| (id, p, k))
            .collect();
        let mut policy = Self::from_shapes(&shapes, snapshot.temperature, snapshot.parameterization)?;
        if snapshot.params.len() != policy.params.len() {
            return Err(SimError::InvalidPolicy(format!(
                "expected {} parameters, snapshot has {}",
                policy.params.len(),
                snapshot.params.len()
            )));
        }
        policy.params = snapshot.params;
        Ok(policy)
    }

    pub fn snapshot(&self) -> PolicySnapshot<T> {
        PolicySnapshot {
            query_ids: self.query_ids.clone(),
            pool_sizes: self.slots.iter().map(|s| s.space.pool_size).collect(),
            mask_counts: self.slots.iter().map(|s| s.space.k).collect(),
            parameterization: self.parameterization,
            temperature: self.temperature,
            params: self.params.clone(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.slots.len()
    }

    pub fn query_index(&self, sample_id: &str) -> Option<usize> {
        self.index.get(sample_id).copied()
    }

    pub fn query_id(&self, query: usize) -> &str {
        &self.query_ids[query]
    }

    pub fn action_space(&self, query: usize) -> &ActionSpace {
        &self.slots[query].space
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    /// Parameters belonging to one query.
    pub fn query_params_mut(&mut self, query: usize) -> &mut [T] {
        let slot = &self.slots[query];
        let range = slot.offset..slot.offset + slot.width;
        &mut self.params[range]
    }

    /// Unscaled logit of every action of `query`.
    pub fn logits(&self, query: usize) -> Vec<T> {
        let slot = &self.slots[query];
        let theta = &self.params[slot.offset..slot.offset + slot.width];
        match self.parameterization {
            Parameterization::Tabular => theta.to_vec(),
            Parameterization::PositionLabel => slot
                .space
                .iter()
                .map(|seq| seq.iter().enumerate().map(|(i, l)| theta[i * slot.space.pool_size + l.index()]).sum())
                .collect(),
        }
    }

    fn argmax(&self, query: usize) -> usize {
        let logits = self.logits(query);
        (0..logits.len()).fold(0, |best, a| if logits[a] > logits[best] { a } else { best })
    }

    fn is_greedy(&self) -> bool {
        self.temperature <= T::zero()
    }

    /// Action probabilities of one query.
    pub fn probabilities(&self, query: usize) -> Vec<T> {
        let logits = self.logits(query);
        if self.is_greedy() {
            let best = self.argmax(query);
            return (0..logits.len()).map(|a| if a == best { T::one() } else { T::zero() }).collect();
        }
        let scaled: Vec<T> = logits.iter().map(|&l| l / self.temperature).collect();
        let lse = log_sum_exp(&scaled);
        scaled.iter().map(|&s| (s - lse).exp()).collect()
    }

    /// Draws an action index for `query`.
    pub fn sample_action<R: Rng + ?Sized>(&self, query: usize, rng: &mut R) -> usize {
        if self.is_greedy() {
            return self.argmax(query);
        }
        let probs = self.probabilities(query);
        let u = T::lit(rng.gen::<f64>());
        let mut acc = T::zero();
        for (a, &p) in probs.iter().enumerate() {
            acc = acc + p;
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }

    /// `KL(self || reference)` for one query, computed exactly.
    pub fn exact_kl(&self, reference: &Self, query: usize) -> T {
        let p = self.probabilities(query);
        let q = reference.probabilities(query);
        p.iter()
            .zip(&q)
            .filter(|(&pi, _)| pi > T::zero())
            .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
            .sum()
    }

    /// Expected value of `values[action]` under the policy for `query`.
    pub fn expectation(&self, query: usize, values: &[T]) -> T {
        self.probabilities(query).iter().zip(values).map(|(&p, &v)| p * v).sum()
    }
}

impl<T: Scalar> DifferentiablePolicy<T> for SoftmaxSequencePolicy<T> {
    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn logprob(&self, query: usize, action: usize) -> Result<T, GrpoError> {
        let slot = self.slots.get(query).ok_or(GrpoError::ActionOutOfRange { query, action })?;
        if action >= slot.space.len() {
            return Err(GrpoError::ActionOutOfRange { query, action });
        }
        if self.is_greedy() {
            return Ok(if action == self.argmax(query) { T::zero() } else { T::neg_infinity() });
        }
        let scaled: Vec<T> = self.logits(query).iter().map(|&l| l / self.temperature).collect();
        Ok(scaled[action] - log_sum_exp(&scaled))
    }

    fn accumulate_logprob_grad(&self, query: usize, action: usize, scale: T, grad: &mut [T]) -> Result<(), GrpoError> {
        let slot = self.slots.get(query).ok_or(GrpoError::ActionOutOfRange { query, action })?;
        if action >= slot.space.len() {
            return Err(GrpoError::ActionOutOfRange { query, action });
        }
        if self.is_greedy() {
            return Ok(());
        }
        // d/dlogit_b log p_a = (1[a = b] - p_b) / temperature
        let factor = scale / self.temperature;
        let pool = slot.space.pool_size;
        for (b, p) in self.probabilities(query).into_iter().enumerate() {
            let indicator = if b == action { T::one() } else { T::zero() };
            let coef = factor * (indicator - p);
            match self.parameterization {
                Parameterization::Tabular => grad[slot.offset + b] = grad[slot.offset + b] + coef,
                Parameterization::PositionLabel => {
                    for (i, l) in slot.space.sequence(b).expect("action in range").iter().enumerate() {
                        let j = slot.offset + i * pool + l.index();
                        grad[j] = grad[j] + coef;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> ResponsePolicy<T> for SoftmaxSequencePolicy<T> {
    fn respond(&self, sample: &MvpSample, rng: &mut ChaCha8Rng) -> Result<SampledResponse<T>, SimError> {
        let query = self
            .query_index(&sample.sample_id)
            .ok_or_else(|| SimError::ActionSpace(format!("policy has no query {}", sample.sample_id)))?;
        let space = self.action_space(query);
        if space.pool_size != sample.pool_size() || space.k != sample.mask_count {
            return Err(SimError::ActionSpace(format!(
                "query {} expects pool {} / K {}, sample has {} / {}",
                sample.sample_id,
                space.pool_size,
                space.k,
                sample.pool_size(),
                sample.mask_count
            )));
        }
        let action = self.sample_action(query, rng);
        let labels = space.sequence(action).expect("sampled action in range").to_vec();
        Ok(SampledResponse {
            text: render_response(&labels, true),
            labels,
            action,
            logprob: Some(self.logprob(query, action)?),
        })
    }
}

/// Behaviour of a scripted policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedKind {
    /// Always the ground truth.
    Oracle,
    /// Uniform over duplicate-free sequences of length K.
    Random,
    /// The correct label set in uniformly random order.
    ContentOnly,
    /// Ground truth with each position replaced by a uniform pool label with this probability.
    Noisy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    pub kind: ScriptedKind,
    /// Probability of emitting the think/answer tags.
    pub format_rate: f64,
}

impl ScriptedPolicy {
    pub fn new(kind: ScriptedKind, format_rate: f64) -> Self {
        Self { kind, format_rate }
    }

    pub fn oracle() -> Self {
        Self::new(ScriptedKind::Oracle, 1.0)
    }

    /// Parses `oracle`, `random`, `content_only` or `noisy:<p>`.
    pub fn parse_kind(s: &str) -> Option<ScriptedKind> {
        match s {
            "oracle" => Some(ScriptedKind::Oracle),
            "random" => Some(ScriptedKind::Random),
            "content_only" => Some(ScriptedKind::ContentOnly),
            _ => {
                let p: f64 = s.strip_prefix("noisy:")?.parse().ok()?;
                (0.0..=1.0).contains(&p).then_some(ScriptedKind::Noisy(p))
            }
        }
    }

    fn labels<R: Rng + ?Sized>(&self, sample: &MvpSample, rng: &mut R) -> Vec<CandidateLabel> {
        let pool: Vec<CandidateLabel> = sample.candidates.iter().map(|c| c.label).collect();
        match self.kind {
            ScriptedKind::Oracle => sample.answer.clone(),
            ScriptedKind::Random => {
                let mut pool = pool;
                let k = sample.mask_count.min(pool.len());
                pool.partial_shuffle(rng, k).0.to_vec()
            }
            ScriptedKind::ContentOnly => {
                let mut labels = sample.answer.clone();
                labels.shuffle(rng);
                labels
            }
            ScriptedKind::Noisy(p) => sample
                .answer
                .iter()
                .map(|&l| if rng.gen_bool(p) { *pool.choose(rng).unwrap_or(&l) } else { l })
                .collect(),
        }
    }
}

impl<T: Scalar> ResponsePolicy<T> for ScriptedPolicy {
    fn respond(&self, sample: &MvpSample, rng: &mut ChaCha8Rng) -> Result<SampledResponse<T>, SimError> {
        let labels = self.labels(sample, rng);
        let well_formed = rng.gen_bool(self.format_rate.clamp(0.0, 1.0));
        Ok(SampledResponse { text: render_response(&labels, well_formed), labels, action: NO_ACTION, logprob: None })
    }
}

/// Samples `g` responses for one sample. Rewards and advantages are left at zero.
pub fn rollout<T: Scalar, P: ResponsePolicy<T> + ?Sized>(
    policy: &P,
    sample: &MvpSample,
    query: usize,
    g: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutGroup<T>, SimError> {
    let outputs = (0..g)
        .map(|_| {
            let r = policy.respond(sample, rng)?;
            Ok(Rollout {
                action: r.action,
                response: r.text,
                logprob_old: r.logprob.unwrap_or_else(T::zero),
                logprob_ref: r.logprob.unwrap_or_else(T::zero),
                reward: T::zero(),
                advantage: T::zero(),
            })
        })
        .collect::<Result<_, SimError>>()?;
    Ok(RolloutGroup { query, query_id: sample.sample_id.clone(), outputs })
}

/// Scores every response of a group with the total reward.
pub fn score_group<T: Scalar>(
    group: &mut RolloutGroup<T>,
    sample: &MvpSample,
    cfg: &RewardConfig<T>,
) -> Result<Vec<reward::RewardBreakdown<T>>, SimError> {
    group
        .outputs
        .iter_mut()
        .map(|o| {
            let b = reward::total_reward(&o.response, &sample.answer, cfg)?;
            o.reward = b.r_total;
            Ok(b)
        })
        .collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent stream for `(seed, step, query)`.
fn stream_rng(seed: u64, step: usize, query: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ splitmix(step as u64)) ^ query as u64))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean total reward of the sampled rollouts.
    pub mean_reward: f64,
    /// Mean correctness reward of the sampled rollouts.
    pub mean_r_correct: f64,
    /// Correctness reward expected under the policy, averaged over queries.
    pub expected_r_correct: f64,
    pub mean_kl: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Record wall-clock time per step; leaves `wall_ms` at 0 when false so
    /// logs stay byte-identical across runs.
    pub record_wall_time: bool,
    pub parameterization: Parameterization,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { record_wall_time: false, parameterization: Parameterization::default() }
    }
}

pub struct TrainOutcome<T = f64> {
    pub policy: SoftmaxSequencePolicy<T>,
    pub log: Vec<StepLog>,
}

impl<T: Scalar> TrainOutcome<T> {
    /// First step whose expected correctness reward reaches `threshold`.
    pub fn steps_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.log.iter().find(|l| l.expected_r_correct >= threshold).map(|l| l.step)
    }
}

/// Correctness reward of every action of a query, in action order.
pub fn correctness_table<T: Scalar>(space: &ActionSpace, sample: &MvpSample, cfg: &RewardConfig<T>) -> Result<Vec<T>, SimError> {
    space.iter().map(|seq| Ok(reward::correctness_reward(seq, &sample.answer, cfg)?.r_correct)).collect()
}

/// Trains a uniform softmax policy on `corpus` with GRPO.
///
/// Each step samples a group per query, scores it, normalizes advantages
/// and takes one ascent step. The reference policy is frozen at
/// initialization.
pub fn train_sim<T: Scalar>(
    corpus: &[MvpSample],
    grpo_cfg: &GrpoConfig<T>,
    reward_cfg: &RewardConfig<T>,
    steps: usize,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome<T>, SimError> {
    if corpus.is_empty() {
        return Err(SimError::EmptyCorpus);
    }
    grpo_cfg.validate()?;
    reward_cfg.validate()?;
    let mut policy = SoftmaxSequencePolicy::with_parameterization(corpus, grpo_cfg.temperature, options.parameterization)?;
    let reference = policy.clone();
    let tables: Vec<Vec<T>> = corpus
        .iter()
        .enumerate()
        .map(|(q, s)| correctness_table(policy.action_space(q), s, reward_cfg))
        .collect::<Result<_, _>>()?;

    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let started = Instant::now();
        let expected = corpus.iter().enumerate().map(|(q, _)| policy.expectation(q, &tables[q])).sum::<T>()
            / T::of_usize(corpus.len());

        let scored: Vec<(RolloutGroup<T>, Vec<T>)> = corpus
            .par_iter()
            .enumerate()
            .map(|(q, sample)| {
                let mut rng = stream_rng(seed, step, q);
                let mut group = rollout(&policy, sample, q, grpo_cfg.group_size_g, &mut rng)?;
                let breakdowns = score_group(&mut group, sample, reward_cfg)?;
                for o in &mut group.outputs {
                    o.logprob_ref = reference.logprob(q, o.action)?;
                }
                group.assign_advantages(grpo_cfg.adv_eps)?;
                Ok((group, breakdowns.iter().map(|b| b.r_correct()).collect()))
            })
            .collect::<Result<_, SimError>>()?;
        let (batch, corrects): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
        let corrects: Vec<T> = corrects.into_iter().flatten().collect();

        let report = grpo::grpo_step(&mut policy, &batch, grpo_cfg).map_err(|source| SimError::Diverged { step, source })?;
        log.push(StepLog {
            step,
            mean_reward: report.mean_reward.as_f64(),
            mean_r_correct: crate::scalar::mean(&corrects).unwrap_or_else(T::zero).as_f64(),
            expected_r_correct: expected.as_f64(),
            mean_kl: report.mean_kl.as_f64(),
            grad_norm: report.grad_norm.as_f64(),
            wall_ms: if options.record_wall_time { started.elapsed().as_millis() as u64 } else { 0 },
        });
    }
    Ok(TrainOutcome { policy, log })
}

/// Per-sample evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub response: String,
    /// Fraction of positions predicted exactly.
    pub accuracy: f64,
    /// Whole answer exactly right.
    pub exact_sequence: bool,
    pub format_ok: bool,
    pub r_correct: f64,
    pub r_total: f64,
}

pub const ACCURACY_DEFINITION: &str =
    "avg_accuracy = mean over samples of (exact-position matches / K); sequence_accuracy = fraction of samples answered exactly";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_definition: String,
    pub samples: usize,
    pub avg_accuracy: f64,
    pub sequence_accuracy: f64,
    pub avg_format_rate: f64,
    pub mean_r_correct: f64,
    pub mean_r_total: f64,
    pub per_sample: Vec<EvalRecord>,
}

/// Answers every sample once and measures accuracy and format rate.
pub fn evaluate<T: Scalar, P: ResponsePolicy<T> + ?Sized>(
    policy: &P,
    corpus: &[MvpSample],
    reward_cfg: &RewardConfig<T>,
    seed: u64,
) -> Result<EvalReport, SimError> {
    if corpus.is_empty() {
        return Err(SimError::EmptyCorpus);
    }
    let per_sample: Vec<EvalRecord> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, sample)| {
            let mut rng = stream_rng(seed, 0, i);
            let response = policy.respond(sample, &mut rng)?;
            let parsed = reward::parse_response(&response.text);
            let k = sample.answer.len().max(1);
            let exact = parsed.labels.iter().zip(&sample.answer).filter(|(p, t)| p == t).count();
            let breakdown = reward::total_reward(&response.text, &sample.answer, reward_cfg)?;
            Ok(EvalRecord {
                sample_id: sample.sample_id.clone(),
                accuracy: exact as f64 / k as f64,
                exact_sequence: parsed.labels == sample.answer,
                format_ok: parsed.format_ok,
                r_correct: breakdown.r_correct().as_f64(),
                r_total: breakdown.r_total.as_f64(),
                response: response.text,
            })
        })
        .collect::<Result<_, SimError>>()?;

    let n = per_sample.len() as f64;
    let avg = |f: &dyn Fn(&EvalRecord) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        accuracy_definition: ACCURACY_DEFINITION.to_string(),
        samples: per_sample.len(),
        avg_accuracy: avg(&|r| r.accuracy),
        sequence_accuracy: avg(&|r| f64::from(u8::from(r.exact_sequence))),
        avg_format_rate: avg(&|r| f64::from(u8::from(r.format_ok))),
        mean_r_correct: avg(&|r| r.r_correct),
        mean_r_total: avg(&|r| r.r_total),
        per_sample,
    })
}

/// Quality-filter scorer backed by a simulated policy: each call answers the
/// sample once and returns the correctness reward.
pub struct PolicyScorer<P> {
    pub policy: P,
    pub reward: RewardConfig<f64>,
    rng: ChaCha8Rng,
}

impl<P> PolicyScorer<P> {
    pub fn new(policy: P, reward: RewardConfig<f64>, seed: u64) -> Self {
        Self { policy, reward, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl<P: ResponsePolicy<f64>> RolloutScorer for PolicyScorer<P> {
    fn score(&mut self, sample: &MvpSample) -> Result<f64, String> {
        let response = self.policy.respond(sample, &mut self.rng).map_err(|e| e.to_string())?;
        reward::total_reward(&response.text, &sample.answer, &self.reward)
            .map(|b| b.r_correct())
            .map_err(|e| e.to_string())
    }
}
