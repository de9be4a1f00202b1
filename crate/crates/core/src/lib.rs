//! Masked video prediction toolkit.
//!
//! * [`types`]: samples, labels and the JSONL dataset format.
//! * [`synthesis`]: de-duplicated frame selection and sample construction.
//! * [`reward`]: response parsing and the hierarchical reward.
//! * [`grpo`]: group-normalized advantages and the clipped, KL-regularized objective.
//! * [`policy_sim`]: small policies, a training loop and an evaluator.
//! * [`verify`]: brute-force self-check suites.
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod fixtures;
pub mod grpo;
pub mod policy_sim;
pub mod reward;
pub mod scalar;
pub mod synthesis;
pub mod types;
pub mod verify;

pub use scalar::Scalar;

pub type RewardConfigF64 = reward::RewardConfig<f64>;
pub type RewardConfigF32 = reward::RewardConfig<f32>;
pub type RewardBreakdownF64 = reward::RewardBreakdown<f64>;
pub type RewardBreakdownF32 = reward::RewardBreakdown<f32>;
pub type GrpoConfigF64 = grpo::GrpoConfig<f64>;
pub type GrpoConfigF32 = grpo::GrpoConfig<f32>;
pub type RolloutGroupF64 = grpo::RolloutGroup<f64>;
pub type RolloutGroupF32 = grpo::RolloutGroup<f32>;
pub type SoftmaxPolicyF64 = policy_sim::SoftmaxSequencePolicy<f64>;
pub type SoftmaxPolicyF32 = policy_sim::SoftmaxSequencePolicy<f32>;
pub type EmbeddingSequenceF32 = synthesis::EmbeddingSequence<f32>;
pub type EmbeddingSequenceF64 = synthesis::EmbeddingSequence<f64>;
