//! Group Relative Policy Optimization.
//!
//! Rewards inside a group are normalized against the group's own mean and
//! standard deviation, so no critic is needed. The policy then ascends a
//! clipped surrogate regularized toward a frozen reference policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{self, Scalar};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group size {0} is too small, need at least 2")]
    GroupSize(usize),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error("length mismatch: group has {group} outputs, got {given} log-probabilities")]
    LengthMismatch { group: usize, given: usize },
    #[error("action {action} out of range for query {query}")]
    ActionOutOfRange { query: usize, action: usize },
    #[error("non-finite gradient from group {group}")]
    Diverged { group: String },
    #[error("invalid GRPO config: {0}")]
    InvalidConfig(String),
}

/// Optimization constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig<T = f64> {
    /// Rollouts per query.
    pub group_size_g: usize,
    /// Half-width of the probability-ratio clip interval.
    pub clip_eps: T,
    /// Weight of the KL penalty toward the reference policy.
    pub kl_coeff: T,
    /// Floor added to the group standard deviation.
    pub adv_eps: T,
    pub learning_rate: T,
    /// Sampling temperature for rollouts.
    pub temperature: T,
}

impl<T: Scalar> Default for GrpoConfig<T> {
    fn default() -> Self {
        Self {
            group_size_g: 5,
            clip_eps: T::lit(0.2),
            kl_coeff: T::lit(0.001),
            adv_eps: T::lit(1e-6),
            learning_rate: T::lit(2.0),
            temperature: T::one(),
        }
    }
}

impl<T: Scalar> GrpoConfig<T> {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size_g < 2 {
            return Err(GrpoError::GroupSize(self.group_size_g));
        }
        let positive = |v: T| v.is_finite() && v > T::zero();
        if !positive(self.clip_eps) || !positive(self.adv_eps) || !positive(self.temperature) {
            return Err(GrpoError::InvalidConfig("clip_eps, adv_eps and temperature must be positive".into()));
        }
        if !(self.kl_coeff.is_finite() && self.kl_coeff >= T::zero()) {
            return Err(GrpoError::InvalidConfig("kl_coeff must be non-negative".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= T::zero()) {
            return Err(GrpoError::InvalidConfig("learning_rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// One sampled output of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout<T = f64> {
    /// Index into the policy's action space for the query.
    pub action: usize,
    #[serde(default)]
    pub response: String,
    pub logprob_old: T,
    pub logprob_ref: T,
    pub reward: T,
    pub advantage: T,
}

/// All rollouts sampled for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup<T = f64> {
    /// Query index understood by the policy.
    pub query: usize,
    pub query_id: String,
    pub outputs: Vec<Rollout<T>>,
}

impl<T: Scalar> RolloutGroup<T> {
    pub fn rewards(&self) -> Vec<T> {
        self.outputs.iter().map(|o| o.reward).collect()
    }

    /// Overwrites each output's advantage from the group rewards.
    pub fn assign_advantages(&mut self, adv_eps: T) -> Result<(), GrpoError> {
        let adv = compute_advantages(&self.rewards(), adv_eps)?;
        for (o, a) in self.outputs.iter_mut().zip(adv) {
            o.advantage = a;
        }
        Ok(())
    }
}

/// A policy with per-(query, action) log-probabilities and their gradients.
pub trait DifferentiablePolicy<T: Scalar> {
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    fn logprob(&self, query: usize, action: usize) -> Result<T, GrpoError>;
    /// Adds `scale * d logprob(query, action) / d params` into `grad`.
    fn accumulate_logprob_grad(&self, query: usize, action: usize, scale: T, grad: &mut [T]) -> Result<(), GrpoError>;
}

/// `A_i = (r_i - mean) / (std + adv_eps)` with the population std.
pub fn compute_advantages<T: Scalar>(rewards: &[T], adv_eps: T) -> Result<Vec<T>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupSize(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("compute_advantages"));
    }
    let mean = scalar::mean(rewards).expect("non-empty");
    let std = scalar::population_std(rewards).expect("non-empty");
    Ok(rewards.iter().map(|&r| (r - mean) / (std + adv_eps)).collect())
}

fn check_finite<T: Scalar>(what: &'static str, values: &[T]) -> Result<(), GrpoError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GrpoError::NonFinite(what))
    }
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)` with `rho = exp(new - old)`.
pub fn clipped_surrogate<T: Scalar>(logprob_new: T, logprob_old: T, advantage: T, clip_eps: T) -> Result<T, GrpoError> {
    check_finite("clipped_surrogate", &[logprob_new, logprob_old, advantage, clip_eps])?;
    let rho = (logprob_new - logprob_old).exp();
    let clipped = rho.max(T::one() - clip_eps).min(T::one() + clip_eps);
    Ok((rho * advantage).min(clipped * advantage))
}

/// Per-sample k3 estimator of `KL(pi || pi_ref)`; zero iff the inputs match.
pub fn kl_penalty<T: Scalar>(logprob_new: T, logprob_ref: T) -> Result<T, GrpoError> {
    check_finite("kl_penalty", &[logprob_new, logprob_ref])?;
    let d = logprob_ref - logprob_new;
    Ok((d.exp_m1() - d).max(T::zero()))
}

/// `J = (1/G) * sum_i (surrogate_i - kl_coeff * kl_i)` for one group.
pub fn group_objective<T: Scalar>(group: &RolloutGroup<T>, logprobs_new: &[T], cfg: &GrpoConfig<T>) -> Result<T, GrpoError> {
    if logprobs_new.len() != group.outputs.len() {
        return Err(GrpoError::LengthMismatch { group: group.outputs.len(), given: logprobs_new.len() });
    }
    if group.outputs.is_empty() {
        return Err(GrpoError::GroupSize(0));
    }
    let mut total = T::zero();
    for (o, &lp) in group.outputs.iter().zip(logprobs_new) {
        total = total + clipped_surrogate(lp, o.logprob_old, o.advantage, cfg.clip_eps)?
            - cfg.kl_coeff * kl_penalty(lp, o.logprob_ref)?;
    }
    Ok(total / T::of_usize(group.outputs.len()))
}

fn current_logprobs<T: Scalar, P: DifferentiablePolicy<T> + ?Sized>(
    policy: &P,
    group: &RolloutGroup<T>,
) -> Result<Vec<T>, GrpoError> {
    group.outputs.iter().map(|o| policy.logprob(group.query, o.action)).collect()
}

/// Mean of the group objectives over a batch, at the policy's current parameters.
pub fn batch_objective<T: Scalar, P: DifferentiablePolicy<T> + ?Sized>(
    policy: &P,
    batch: &[RolloutGroup<T>],
    cfg: &GrpoConfig<T>,
) -> Result<T, GrpoError> {
    let mut total = T::zero();
    for group in batch {
        total = total + group_objective(group, &current_logprobs(policy, group)?, cfg)?;
    }
    Ok(total / T::of_usize(batch.len().max(1)))
}

/// Gradient of one group's objective, scaled by `1 / batch_len`.
///
/// The clipped branch of the surrogate is constant in the parameters, so a
/// sample contributes `A * rho` only while the unclipped term is the minimum.
/// The k3 penalty contributes `(1 - exp(ref - new))` per unit of logprob.
fn group_gradient<T: Scalar, P: DifferentiablePolicy<T> + ?Sized>(
    policy: &P,
    group: &RolloutGroup<T>,
    cfg: &GrpoConfig<T>,
    batch_len: usize,
) -> Result<Vec<T>, GrpoError> {
    let mut grad = vec![T::zero(); policy.params().len()];
    let norm = T::one() / (T::of_usize(group.outputs.len().max(1)) * T::of_usize(batch_len));
    for o in &group.outputs {
        let lp = policy.logprob(group.query, o.action)?;
        check_finite("group_gradient", &[lp, o.logprob_old, o.logprob_ref, o.advantage])?;
        let rho = (lp - o.logprob_old).exp();
        let clipped = rho.max(T::one() - cfg.clip_eps).min(T::one() + cfg.clip_eps);
        let surrogate = if rho * o.advantage <= clipped * o.advantage { o.advantage * rho } else { T::zero() };
        let kl = T::one() - (o.logprob_ref - lp).exp();
        let scale = (surrogate - cfg.kl_coeff * kl) * norm;
        if scale != T::zero() {
            policy.accumulate_logprob_grad(group.query, o.action, scale, &mut grad)?;
        }
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GrpoError::Diverged { group: group.query_id.clone() });
    }
    Ok(grad)
}

/// Analytic gradient of [`batch_objective`] with respect to the policy parameters.
///
/// Groups are evaluated in parallel and summed in group order.
pub fn objective_gradient<T: Scalar, P: DifferentiablePolicy<T> + Sync + ?Sized>(
    policy: &P,
    batch: &[RolloutGroup<T>],
    cfg: &GrpoConfig<T>,
) -> Result<Vec<T>, GrpoError> {
    let per_group: Vec<Vec<T>> =
        batch.par_iter().map(|g| group_gradient(policy, g, cfg, batch.len())).collect::<Result<_, _>>()?;
    let mut grad = vec![T::zero(); policy.params().len()];
    for g in per_group {
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc = *acc + v;
        }
    }
    Ok(grad)
}

/// Summary of one optimizer step, measured before the update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport<T = f64> {
    pub mean_reward: T,
    pub mean_kl: T,
    pub grad_norm: T,
    pub objective: T,
}

/// One plain gradient-ascent step on the batch objective.
pub fn grpo_step<T: Scalar, P: DifferentiablePolicy<T> + Sync + ?Sized>(
    policy: &mut P,
    batch: &[RolloutGroup<T>],
    cfg: &GrpoConfig<T>,
) -> Result<StepReport<T>, GrpoError> {
    let grad = objective_gradient(&*policy, batch, cfg)?;
    let objective = batch_objective(&*policy, batch, cfg)?;

    let mut rewards = Vec::new();
    let mut kls = Vec::new();
    for group in batch {
        for o in &group.outputs {
            rewards.push(o.reward);
            kls.push(kl_penalty(policy.logprob(group.query, o.action)?, o.logprob_ref)?);
        }
    }
    let grad_norm = grad.iter().map(|&g| g * g).sum::<T>().sqrt();

    for (p, g) in policy.params_mut().iter_mut().zip(&grad) {
        *p = *p + cfg.learning_rate * *g;
    }
    Ok(StepReport {
        mean_reward: scalar::mean(&rewards).unwrap_or_else(T::zero),
        mean_kl: scalar::mean(&kls).unwrap_or_else(T::zero),
        grad_norm,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_group_has_zero_advantages() {
        let adv = compute_advantages(&[1.0f64; 5], 1e-6).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn two_point_group() {
        let adv = compute_advantages(&[0.0f64, 2.0], 0.0).unwrap();
        assert_eq!(adv, vec![-1.0, 1.0]);
    }

    #[test]
    fn advantage_errors() {
        assert_eq!(compute_advantages(&[1.0f64], 1e-6), Err(GrpoError::GroupSize(1)));
        assert!(matches!(compute_advantages(&[1.0f64, f64::NAN], 1e-6), Err(GrpoError::NonFinite(_))));
    }

    #[test]
    fn surrogate_cases() {
        assert_eq!(clipped_surrogate(-1.3f64, -1.3, 1.7, 0.2).unwrap(), 1.7);
        let two = 2f64.ln();
        assert!((clipped_surrogate(two, 0.0, 1.0, 0.2).unwrap() - 1.2).abs() < 1e-12);
        assert!((clipped_surrogate(-two, 0.0, -1.0, 0.2).unwrap() + 0.8).abs() < 1e-12);
        assert!(clipped_surrogate(f64::INFINITY, 0.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_penalty(-2.0f64, -2.0).unwrap(), 0.0);
        assert!((kl_penalty(0.0f64, 1.0).unwrap() - (std::f64::consts::E - 2.0)).abs() < 1e-12);
        assert!((kl_penalty(0.0f64, -1.0).unwrap() - (-1f64).exp()).abs() < 1e-12);
        assert!(kl_penalty(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn group_objective_length_mismatch() {
        let group = RolloutGroup::<f64> { query: 0, query_id: "q".into(), outputs: vec![] };
        assert!(matches!(group_objective(&group, &[0.0], &GrpoConfig::default()), Err(GrpoError::LengthMismatch { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::<f64>::default().validate().is_ok());
        let bad = GrpoConfig::<f64> { group_size_g: 1, ..Default::default() };
        assert_eq!(bad.validate(), Err(GrpoError::GroupSize(1)));
    }
}
