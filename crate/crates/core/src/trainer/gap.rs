//! Held-out evaluation of order robustness.
//!
//! For a sample of tasks we build (original, reordered) input pairs whose
//! gold answers are kept consistent by the answer-relabeling rules, then
//! measure how much greedy accuracy drops when the images arrive in a
//! different order. A policy that keys on image position shows a large
//! positive gap; an order-robust one shows a gap near zero.

use crate::env::{encode_instance, random_mappable_permutation, transform_answer, Vocab};
use crate::policy::{greedy_decode, PolicyParams};
use crate::reward;
use crate::rng::{derive_rng, STREAM_EVAL};
use crate::types::{apply_permutation, RewardWeights, TaskInstance, TokenId};

use super::TrainerError;

/// One original task and a reordered twin with a consistently relabeled
/// gold answer, both pre-encoded for the policy.
#[derive(Debug, Clone)]
pub struct GapPair {
    pub original: TaskInstance,
    pub permuted: TaskInstance,
    pub original_tokens: Vec<TokenId>,
    pub permuted_tokens: Vec<TokenId>,
}

/// Accuracy on each side of the pairs and their difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub accuracy_original: f64,
    pub accuracy_permuted: f64,
    /// `accuracy_original − accuracy_permuted`.
    pub gap: f64,
    pub pairs: usize,
}

/// Builds up to `max_pairs` evaluation pairs from the front of `data`.
/// Tasks with no usable reordering (single image, or every reordering
/// would break the question) are skipped. Fully deterministic in `seed`.
pub fn build_gap_eval_set(
    data: &[TaskInstance],
    vocab: &Vocab,
    seed: u64,
    max_pairs: usize,
) -> Result<Vec<GapPair>, TrainerError> {
    let mut pairs = Vec::new();
    for (i, x) in data.iter().enumerate() {
        if pairs.len() >= max_pairs {
            break;
        }
        let mut rng = derive_rng(seed, &[STREAM_EVAL, i as u64]);
        let Some(sigma) = random_mappable_permutation(x, &mut rng) else {
            continue;
        };
        let answer = transform_answer(&x.answer, &sigma, x)?;
        let mut permuted = apply_permutation(x, &sigma)?;
        permuted.answer = answer;
        let original_tokens = encode_instance(x, vocab)?;
        let permuted_tokens = encode_instance(&permuted, vocab)?;
        pairs.push(GapPair {
            original: x.clone(),
            permuted,
            original_tokens,
            permuted_tokens,
        });
    }
    Ok(pairs)
}

/// Computes the gap with a caller-supplied answerer, which reports whether
/// the policy's output is correct for the given task and encoded input.
pub fn permutation_gap_with<F>(pairs: &[GapPair], mut answer: F) -> Result<GapReport, TrainerError>
where
    F: FnMut(&TaskInstance, &[TokenId]) -> Result<bool, TrainerError>,
{
    if pairs.is_empty() {
        return Err(TrainerError::EmptyEvalSet);
    }
    let mut correct_original = 0usize;
    let mut correct_permuted = 0usize;
    for pair in pairs {
        if answer(&pair.original, &pair.original_tokens)? {
            correct_original += 1;
        }
        if answer(&pair.permuted, &pair.permuted_tokens)? {
            correct_permuted += 1;
        }
    }
    let n = pairs.len() as f64;
    let accuracy_original = correct_original as f64 / n;
    let accuracy_permuted = correct_permuted as f64 / n;
    Ok(GapReport {
        accuracy_original,
        accuracy_permuted,
        gap: accuracy_original - accuracy_permuted,
        pairs: pairs.len(),
    })
}

/// Gap under greedy decoding with the given parameters.
pub fn permutation_gap(
    params: &PolicyParams,
    vocab: &Vocab,
    pairs: &[GapPair],
) -> Result<GapReport, TrainerError> {
    let weights = RewardWeights::default();
    permutation_gap_with(pairs, |task, tokens| {
        let out = greedy_decode(params, tokens)?;
        let text = vocab.detokenize(&out);
        Ok(reward::score_for_instance(&text, task, &weights).accuracy_ok)
    })
}
