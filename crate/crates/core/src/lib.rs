//! Desk-scale study harness for group-relative policy optimization with
//! permutation-augmented rollouts on interleaved multi-image questions.
//!
//! The crate is organized as a pipeline:
//!
//! * [`types`] — shared domain types (tasks, permutations, rollouts, config).
//! * [`dataset`] — the line-delimited record format.
//! * [`env`] — synthetic multi-image task generator, tokenizer, ground-truth
//!   oracle, and the answer-remapping rule for permuted inputs.
//! * [`policy`] — a tiny autoregressive policy with exact analytic gradients.
//! * [`reward`] — rule-based format and accuracy scoring.
//! * [`grpo`] — group-relative advantages, merged-group normalization, and
//!   the clipped surrogate loss with a KL penalty.
//! * [`datapipe`] — dataset filtering, difficulty scoring, offline
//!   permutation augmentation, and the semantic-judge wire client.
//! * [`trainer`] — the training loop: schedules, group construction,
//!   metrics, checkpointing, permutation-gap evaluation, sweeps.

pub mod dataset;
pub mod datapipe;
pub mod env;
pub mod grpo;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod trainer;
pub mod types;

pub use types::{
    apply_permutation, Answer, AnswerKind, AnswerSpace, CoinScope, CoreError, ImageDescriptor,
    LossMode, MergedBatch, OrderSensitivity, Permutation, QueryToken, Response, RewardWeights,
    RolloutGroup, TaskInstance, TokenId, TrainerConfig, IMAGE_MARKER,
};
