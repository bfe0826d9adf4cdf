//! Dataset preparation pipeline: structural filtering, difficulty scoring
//! and banding, and permutation augmentation.
//!
//! Stages are pure functions over instance vectors and report what they did
//! (kept/dropped counts, reasons, score distributions) so a preparation run
//! is auditable afterwards. All randomness is derived per (stage, sample,
//! attempt), making every stage reproducible and order-independent.

pub mod judge;

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    encode_instance, random_mappable_permutation, transform_answer_given, EnvError, Vocab,
};
use crate::policy::{self, PolicyParams};
use crate::reward;
use crate::rng::{derive_rng, STREAM_AUGMENT, STREAM_SCORE};
use crate::types::{apply_permutation, CoreError, RewardWeights, TaskInstance};

use self::judge::{JudgeError, SemanticJudge};

#[derive(Debug, Error)]
pub enum DatapipeError {
    #[error("difficulty scoring failed on {id}: {detail}")]
    Scorer { id: String, detail: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

// ---------------------------------------------------------------------------
// Structural filtering
// ---------------------------------------------------------------------------

/// Outcome of the structural filter.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: usize,
    pub dropped: usize,
    /// Drop counts keyed by a short reason code.
    pub reasons: BTreeMap<String, usize>,
}

fn reason_code(err: &CoreError) -> &'static str {
    match err {
        CoreError::MarkerMismatch { .. } => "marker_mismatch",
        CoreError::AnswerNotInSpace { .. } => "answer_not_in_space",
        CoreError::InvalidInstance { .. } => "invalid_instance",
        CoreError::NotABijection { .. } | CoreError::PermutationLength { .. } => "bad_permutation",
        CoreError::UnappliedNotIdentity { .. } => "bad_permutation",
        CoreError::InvalidResponse(_) => "invalid_response",
        CoreError::InvalidGroup(_) => "invalid_group",
        CoreError::InvalidConfig(_) => "invalid_config",
    }
}

/// Drops structurally invalid instances, counting why.
pub fn rule_filter(data: Vec<TaskInstance>) -> (Vec<TaskInstance>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut kept = Vec::with_capacity(data.len());
    for x in data {
        match x.validate() {
            Ok(()) => {
                stats.kept += 1;
                kept.push(x);
            }
            Err(err) => {
                stats.dropped += 1;
                log::debug!("dropping {}: {err}", x.id);
                *stats.reasons.entry(reason_code(&err).to_string()).or_insert(0) += 1;
            }
        }
    }
    (kept, stats)
}

// ---------------------------------------------------------------------------
// Difficulty scoring and banding
// ---------------------------------------------------------------------------

/// One solve attempt at a task: true when the attempt answered correctly.
/// Implementations draw any randomness from the supplied stream only.
pub trait RolloutScorer {
    fn attempt(&self, x: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<bool, DatapipeError>;
}

/// Scores difficulty by sampling a policy and checking answer accuracy.
pub struct PolicyRolloutScorer<'a> {
    pub params: &'a PolicyParams,
    pub vocab: &'a Vocab,
    pub weights: RewardWeights,
}

impl RolloutScorer for PolicyRolloutScorer<'_> {
    fn attempt(&self, x: &TaskInstance, rng: &mut ChaCha8Rng) -> Result<bool, DatapipeError> {
        let input = encode_instance(x, self.vocab)?;
        let sampled = policy::sample(self.params, self.params, &input, rng, self.vocab)
            .map_err(|e| DatapipeError::Scorer {
                id: x.id.clone(),
                detail: e.to_string(),
            })?;
        let breakdown = reward::score_for_instance(&sampled.text, x, &self.weights);
        Ok(breakdown.accuracy_ok)
    }
}

/// Score distribution of a dataset under some scorer. A score is an
/// instance's mean rollout accuracy: near 1 means the scorer already solves
/// it, near 0 means it essentially never does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    /// Instance id → mean rollout accuracy in [0, 1].
    pub per_sample: BTreeMap<String, f64>,
    /// Counts over ten equal-width score bins.
    pub histogram: [usize; 10],
    /// Instances the scorer could not attempt at all.
    pub unscored: usize,
    pub attempts_per_sample: usize,
    /// Mean score over all scored instances.
    pub mean_before: f64,
    /// Mean score of the instances surviving the band filter; set by
    /// [`filter_by_difficulty`].
    pub mean_after: Option<f64>,
}

fn histogram_bin(score: f64) -> usize {
    ((score * 10.0).floor() as usize).min(9)
}

/// Scores each instance as its mean accuracy over `attempts` independent
/// solve attempts. Randomness is derived per (sample, attempt), so scoring
/// is reproducible and insensitive to dataset order. Instances whose
/// attempt fails structurally are counted as unscored rather than aborting
/// the run.
pub fn score_difficulty(
    data: &[TaskInstance],
    scorer: &dyn RolloutScorer,
    attempts: usize,
    seed: u64,
) -> Result<DifficultyReport, DatapipeError> {
    assert!(attempts > 0, "difficulty scoring needs at least one attempt");
    let mut per_sample = BTreeMap::new();
    let mut histogram = [0usize; 10];
    let mut unscored = 0usize;
    let mut sum = 0.0;
    for (i, x) in data.iter().enumerate() {
        let mut successes = 0usize;
        let mut failed_structurally = false;
        for k in 0..attempts {
            let mut rng = derive_rng(seed, &[STREAM_SCORE, i as u64, k as u64]);
            match scorer.attempt(x, &mut rng) {
                Ok(true) => successes += 1,
                Ok(false) => {}
                Err(err) => {
                    log::warn!("cannot score {}: {err}", x.id);
                    failed_structurally = true;
                    break;
                }
            }
        }
        if failed_structurally {
            unscored += 1;
            continue;
        }
        // One correctly-rounded division keeps exact rationals like 1/10 on
        // the band boundary 0.1 bit for bit (no `1.0 − rate` detour).
        let score = successes as f64 / attempts as f64;
        histogram[histogram_bin(score)] += 1;
        sum += score;
        per_sample.insert(x.id.clone(), score);
    }
    let scored = per_sample.len();
    Ok(DifficultyReport {
        mean_before: if scored == 0 { 0.0 } else { sum / scored as f64 },
        per_sample,
        histogram,
        unscored,
        attempts_per_sample: attempts,
        mean_after: None,
    })
}

/// Inclusive accuracy band: instances with `min ≤ score ≤ max` stay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBand {
    pub min: f64,
    pub max: f64,
}

impl Default for DifficultyBand {
    fn default() -> Self {
        // Drop tasks the scorer already solves almost always (score > 0.8:
        // nothing left to learn) and tasks it essentially never solves
        // (score < 0.1: a group of uniform failures has zero advantage
        // everywhere, so no gradient signal).
        DifficultyBand { min: 0.1, max: 0.8 }
    }
}

impl DifficultyBand {
    pub fn contains(&self, score: f64) -> bool {
        (self.min..=self.max).contains(&score)
    }
}

/// Keeps the instances inside the band, stamping each survivor with its
/// measured score, and records the surviving mean in the report. Unscored
/// instances are dropped.
pub fn filter_by_difficulty(
    data: Vec<TaskInstance>,
    report: &mut DifficultyReport,
    band: DifficultyBand,
) -> Vec<TaskInstance> {
    let mut kept = Vec::new();
    let mut sum = 0.0;
    for mut x in data {
        let Some(&score) = report.per_sample.get(&x.id) else {
            continue;
        };
        if band.contains(score) {
            x.difficulty_score = Some(score);
            sum += score;
            kept.push(x);
        }
    }
    report.mean_after = if kept.is_empty() {
        log::warn!(
            "difficulty band [{}, {}] kept nothing out of {} scored instances",
            band.min,
            band.max,
            report.per_sample.len()
        );
        None
    } else {
        Some(sum / kept.len() as f64)
    };
    kept
}

// ---------------------------------------------------------------------------
// Permutation augmentation
// ---------------------------------------------------------------------------

/// Augmentation settings: how many permuted variants to try per instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub seed: u64,
    pub variants_per_instance: usize,
}

/// What the augmentation stage did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentStats {
    pub originals: usize,
    pub produced: usize,
    /// Variants dropped because the gold answer could not be tracked across
    /// the permutation.
    pub dropped_unmappable: usize,
    /// Variants skipped because the judge could not be reached or answered
    /// out of protocol.
    pub judge_failures: usize,
    /// Instances with no usable non-identity permutation at all.
    pub no_permutation: usize,
}

/// Expands a dataset with permuted variants: each variant reorders one
/// instance's images by a random answer-trackable permutation and carries
/// the correspondingly remapped gold answer.
///
/// The judge decides whether the permutation changes the intended answer;
/// the relabeling rule then either passes the answer through or follows the
/// originally-correct image to its new label. Variants whose answer cannot
/// be tracked are dropped (and counted) rather than guessed.
pub fn augment_permute(
    data: &[TaskInstance],
    judge: &dyn SemanticJudge,
    cfg: AugmentConfig,
) -> (Vec<TaskInstance>, AugmentStats) {
    let mut out = Vec::with_capacity(data.len() * (1 + cfg.variants_per_instance));
    let mut stats = AugmentStats {
        originals: data.len(),
        ..AugmentStats::default()
    };
    for (i, x) in data.iter().enumerate() {
        out.push(x.clone());
        for v in 0..cfg.variants_per_instance {
            let mut rng = derive_rng(cfg.seed, &[STREAM_AUGMENT, i as u64, v as u64]);
            let Some(sigma) = random_mappable_permutation(x, &mut rng) else {
                stats.no_permutation += 1;
                continue;
            };
            let changed = match judge.semantics_changed(x, &sigma) {
                Ok(changed) => changed,
                Err(err) => {
                    log::warn!("judge failed on {} ({err}); skipping variant", x.id);
                    stats.judge_failures += 1;
                    continue;
                }
            };
            let answer = match transform_answer_given(!changed, &x.answer, &sigma, x) {
                Ok(answer) => answer,
                Err(EnvError::UnmappableAnswer { reason }) => {
                    log::debug!("dropping variant of {}: {reason}", x.id);
                    stats.dropped_unmappable += 1;
                    continue;
                }
                Err(err) => {
                    log::warn!("variant of {} failed: {err}", x.id);
                    stats.dropped_unmappable += 1;
                    continue;
                }
            };
            let mut variant = match apply_permutation(x, &sigma) {
                Ok(variant) => variant,
                Err(err) => {
                    log::warn!("cannot permute {}: {err}", x.id);
                    stats.dropped_unmappable += 1;
                    continue;
                }
            };
            variant.answer = answer;
            variant.id = format!("{}#v{v}", variant.id);
            debug_assert!(variant.validate().is_ok());
            stats.produced += 1;
            out.push(variant);
        }
    }
    (out, stats)
}
