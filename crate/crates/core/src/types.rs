//! Shared domain types: tasks, permutations, answers, rollouts, and the
//! trainer configuration.
//!
//! Conventions used throughout the workspace:
//!
//! * Image positions and permutation entries are 0-based.
//! * A permutation `sigma` is stored as the array where position `j` of the
//!   permuted instance holds the original image `sigma[j]`.
//! * All scores, log-probabilities, and advantages are `f64`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier into the environment vocabulary.
pub type TokenId = u32;

/// Surface form of the image placeholder inside serialized queries and
/// rendered question text.
pub const IMAGE_MARKER: &str = "<image>";

/// Errors from structural validation of core types.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("permutation {mapping:?} is not a bijection over 0..{len}")]
    NotABijection { mapping: Vec<usize>, len: usize },
    #[error("permutation length {permutation} does not match image count {images}")]
    PermutationLength { permutation: usize, images: usize },
    #[error("unapplied permutation must carry the identity mapping, got {mapping:?}")]
    UnappliedNotIdentity { mapping: Vec<usize> },
    #[error("instance {id}: query has {markers} image markers but {images} images")]
    MarkerMismatch { id: String, markers: usize, images: usize },
    #[error("instance {id}: answer {answer:?} is not in the declared answer space")]
    AnswerNotInSpace { id: String, answer: String },
    #[error("instance {id}: {detail}")]
    InvalidInstance { id: String, detail: String },
    #[error("response is structurally invalid: {0}")]
    InvalidResponse(String),
    #[error("rollout group is structurally invalid: {0}")]
    InvalidGroup(String),
    #[error("configuration invalid: {0}")]
    InvalidConfig(String),
}

/// One element of a query: either a literal text token or a placeholder that
/// an image's token block replaces during tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryToken {
    Text(String),
    Image,
}

impl QueryToken {
    /// Surface form used in serialized records and rendered question text.
    pub fn surface(&self) -> &str {
        match self {
            QueryToken::Text(s) => s,
            QueryToken::Image => IMAGE_MARKER,
        }
    }
}

impl Serialize for QueryToken {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.surface())
    }
}

impl<'de> Deserialize<'de> for QueryToken {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s == IMAGE_MARKER {
            QueryToken::Image
        } else {
            QueryToken::Text(s)
        })
    }
}

/// Stand-in for an image: a feature vector plus the token block that
/// represents it in the policy's input. The token block is always a
/// deterministic function of `features`, so records may omit it and have it
/// recomputed by the environment's quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDescriptor {
    pub image_id: String,
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub token_block: Vec<String>,
}

/// Whether the ground-truth answer depends on where images sit in the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderSensitivity {
    /// Any reordering of the images leaves the answer unchanged.
    OrderInvariant,
    /// The question refers to image positions, so reordering can change the
    /// answer.
    PositionReferencing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    ChoiceLabel,
    ShortText,
}

/// A gold or extracted answer.
///
/// `choice_image_refs` is present exactly when the choice labels denote
/// images: entry `i` is the image position that label `i` points at. The
/// mapping describes the question's static structure, so permuting the images
/// never rewrites it — relabeling the answer is what tracks content moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub kind: AnswerKind,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice_image_refs: Option<Vec<usize>>,
}

impl Answer {
    pub fn choice(value: impl Into<String>, refs: Vec<usize>) -> Self {
        Answer {
            kind: AnswerKind::ChoiceLabel,
            value: value.into(),
            choice_image_refs: Some(refs),
        }
    }

    pub fn short_text(value: impl Into<String>) -> Self {
        Answer {
            kind: AnswerKind::ShortText,
            value: value.into(),
            choice_image_refs: None,
        }
    }

    /// Canonical comparison form: trimmed, case-folded, and with integer
    /// strings normalized (`"02"` and `"2"` compare equal).
    pub fn canonical_value(&self) -> String {
        canonicalize_answer_text(&self.value, self.kind)
    }

    /// Equality up to canonicalization; ignores `choice_image_refs`.
    pub fn matches(&self, other: &Answer) -> bool {
        self.kind == other.kind && self.canonical_value() == other.canonical_value()
    }
}

/// Shared canonicalization for gold answers and extracted answers.
pub fn canonicalize_answer_text(raw: &str, kind: AnswerKind) -> String {
    let trimmed = raw.trim();
    match kind {
        AnswerKind::ChoiceLabel => trimmed.to_ascii_uppercase(),
        AnswerKind::ShortText => {
            let lowered = trimmed.to_ascii_lowercase();
            match lowered.parse::<i64>() {
                Ok(n) => n.to_string(),
                Err(_) => lowered,
            }
        }
    }
}

/// The set of legal answers for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "snake_case")]
pub enum AnswerSpace {
    Choices(Vec<String>),
    ShortTexts(Vec<String>),
}

impl AnswerSpace {
    pub fn kind(&self) -> AnswerKind {
        match self {
            AnswerSpace::Choices(_) => AnswerKind::ChoiceLabel,
            AnswerSpace::ShortTexts(_) => AnswerKind::ShortText,
        }
    }

    pub fn values(&self) -> &[String] {
        match self {
            AnswerSpace::Choices(v) | AnswerSpace::ShortTexts(v) => v,
        }
    }

    pub fn len(&self) -> usize {
        self.values().len()
    }

    pub fn is_empty(&self) -> bool {
        self.values().is_empty()
    }

    /// Index of `value` in the space, comparing canonically.
    pub fn index_of(&self, value: &str) -> Option<usize> {
        let kind = self.kind();
        let canon = canonicalize_answer_text(value, kind);
        self.values()
            .iter()
            .position(|v| canonicalize_answer_text(v, kind) == canon)
    }

    pub fn contains(&self, answer: &Answer) -> bool {
        answer.kind == self.kind() && self.index_of(&answer.value).is_some()
    }
}

/// One interleaved multi-image question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub query_tokens: Vec<QueryToken>,
    pub images: Vec<ImageDescriptor>,
    pub answer: Answer,
    pub answer_space: AnswerSpace,
    pub order_sensitivity: OrderSensitivity,
    /// Mean rollout accuracy of the scoring policy on this task, stamped by
    /// the preparation pipeline; a multiple of 1/attempts in [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_score: Option<f64>,
    /// Fields this implementation does not interpret; preserved verbatim on
    /// round trip.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl TaskInstance {
    /// Number of image placeholders in the query.
    pub fn marker_count(&self) -> usize {
        self.query_tokens
            .iter()
            .filter(|t| matches!(t, QueryToken::Image))
            .count()
    }

    /// Human-readable question rendering: tokens joined by single spaces with
    /// placeholders shown as `<image>`. This is also the wire form sent to
    /// semantic judges.
    pub fn question_text(&self) -> String {
        let parts: Vec<&str> = self.query_tokens.iter().map(|t| t.surface()).collect();
        parts.join(" ")
    }

    /// Image positions that the answer's choice labels point at, if any.
    pub fn choice_positions(&self) -> Option<&[usize]> {
        self.answer.choice_image_refs.as_deref()
    }

    /// Structural validation; cheap enough to run on every record read.
    pub fn validate(&self) -> Result<(), CoreError> {
        let markers = self.marker_count();
        if markers != self.images.len() {
            return Err(CoreError::MarkerMismatch {
                id: self.id.clone(),
                markers,
                images: self.images.len(),
            });
        }
        for token in &self.query_tokens {
            if let QueryToken::Text(s) = token {
                if s.is_empty() || s.chars().any(char::is_whitespace) {
                    return Err(CoreError::InvalidInstance {
                        id: self.id.clone(),
                        detail: format!("text token {s:?} is empty or contains whitespace"),
                    });
                }
            }
        }
        if !self.answer_space.contains(&self.answer) {
            return Err(CoreError::AnswerNotInSpace {
                id: self.id.clone(),
                answer: self.answer.value.clone(),
            });
        }
        if let Some(refs) = self.choice_positions() {
            if self.answer.kind != AnswerKind::ChoiceLabel {
                return Err(CoreError::InvalidInstance {
                    id: self.id.clone(),
                    detail: "choice_image_refs on a non-choice answer".into(),
                });
            }
            if refs.len() != self.answer_space.len() {
                return Err(CoreError::InvalidInstance {
                    id: self.id.clone(),
                    detail: format!(
                        "{} choice refs for {} labels",
                        refs.len(),
                        self.answer_space.len()
                    ),
                });
            }
            let distinct: BTreeSet<usize> = refs.iter().copied().collect();
            if distinct.len() != refs.len() || refs.iter().any(|&p| p >= self.images.len()) {
                return Err(CoreError::InvalidInstance {
                    id: self.id.clone(),
                    detail: format!("choice refs {refs:?} are not distinct in-range positions"),
                });
            }
        }
        if let Some(score) = self.difficulty_score {
            if !(0.0..=1.0).contains(&score) {
                return Err(CoreError::InvalidInstance {
                    id: self.id.clone(),
                    detail: format!("difficulty score {score} outside [0, 1]"),
                });
            }
        }
        for image in &self.images {
            if image.features.is_empty() {
                return Err(CoreError::InvalidInstance {
                    id: self.id.clone(),
                    detail: format!("image {} has no features", image.image_id),
                });
            }
            if image.features.iter().any(|f| !f.is_finite()) {
                return Err(CoreError::InvalidInstance {
                    id: self.id.clone(),
                    detail: format!("image {} has non-finite features", image.image_id),
                });
            }
        }
        Ok(())
    }
}

/// A reordering of the images of one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    /// Position `j` of the permuted instance holds original image
    /// `mapping[j]`.
    pub mapping: Vec<usize>,
    /// Whether this group's input was actually reordered. Identity copies
    /// produced when the permutation coin comes up tails carry
    /// `applied == false` and must hold the identity mapping.
    pub applied: bool,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        Permutation {
            mapping: (0..len).collect(),
            applied: false,
        }
    }

    /// Builds an applied permutation after checking bijectivity. An identity
    /// mapping is accepted but marked unapplied.
    pub fn new(mapping: Vec<usize>) -> Result<Self, CoreError> {
        let p = Permutation {
            applied: !is_identity_mapping(&mapping),
            mapping,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        is_identity_mapping(&self.mapping)
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let len = self.mapping.len();
        let mut seen = vec![false; len];
        for &v in &self.mapping {
            if v >= len || seen[v] {
                return Err(CoreError::NotABijection {
                    mapping: self.mapping.clone(),
                    len,
                });
            }
            seen[v] = true;
        }
        if !self.applied && !self.is_identity() {
            return Err(CoreError::UnappliedNotIdentity {
                mapping: self.mapping.clone(),
            });
        }
        Ok(())
    }

    /// Composition `self ∘ other`: `(self ∘ other)[j] = self[other[j]]`.
    /// Under the "position j receives original `mapping[j]`" convention,
    /// applying the composite to a list equals applying `self` to the list
    /// and then `other` to the result.
    pub fn compose(&self, other: &Permutation) -> Result<Permutation, CoreError> {
        if self.len() != other.len() {
            return Err(CoreError::PermutationLength {
                permutation: self.len(),
                images: other.len(),
            });
        }
        let mapping: Vec<usize> = other.mapping.iter().map(|&j| self.mapping[j]).collect();
        Permutation::new(mapping)
    }

    /// The permutation that undoes `self`.
    pub fn inverse(&self) -> Permutation {
        let mut mapping = vec![0usize; self.len()];
        for (j, &v) in self.mapping.iter().enumerate() {
            mapping[v] = j;
        }
        Permutation {
            applied: !is_identity_mapping(&mapping),
            mapping,
        }
    }

    /// Compact id suffix, e.g. `p2-0-1`.
    pub fn id_suffix(&self) -> String {
        let parts: Vec<String> = self.mapping.iter().map(|v| v.to_string()).collect();
        format!("p{}", parts.join("-"))
    }

    /// All `n!` permutations of `n` positions, identity first, in a stable
    /// order. Intended for exhaustive checks over small `n`.
    pub fn enumerate(n: usize) -> Vec<Permutation> {
        assert!(n <= 8, "exhaustive enumeration is for small n, got {n}");
        let mut out = Vec::new();
        let mut current: Vec<usize> = (0..n).collect();
        loop {
            out.push(Permutation {
                applied: !is_identity_mapping(&current),
                mapping: current.clone(),
            });
            // Next lexicographic permutation.
            let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| current[i] < current[i + 1])
            else {
                break;
            };
            let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
            current.swap(i, j);
            current[i + 1..].reverse();
        }
        out
    }
}

fn is_identity_mapping(mapping: &[usize]) -> bool {
    mapping.iter().enumerate().all(|(j, &v)| j == v)
}

/// Reorders an instance's images so that position `j` holds original image
/// `sigma[j]`. The query text, answer, and answer space are untouched; only
/// content moves. The id is annotated with the permutation.
pub fn apply_permutation(x: &TaskInstance, sigma: &Permutation) -> Result<TaskInstance, CoreError> {
    sigma.validate()?;
    if sigma.len() != x.images.len() {
        return Err(CoreError::PermutationLength {
            permutation: sigma.len(),
            images: x.images.len(),
        });
    }
    let images: Vec<ImageDescriptor> = sigma
        .mapping
        .iter()
        .map(|&src| x.images[src].clone())
        .collect();
    let mut out = x.clone();
    out.images = images;
    out.id = format!("{}#{}", x.id, sigma.id_suffix());
    Ok(out)
}

/// One sampled completion, with the log-probabilities recorded at sampling
/// time under the behavior policy and the fixed reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub logprob_old: f64,
    pub logprob_ref: f64,
}

impl Response {
    pub fn new(
        tokens: Vec<TokenId>,
        text: String,
        logprob_old: f64,
        logprob_ref: f64,
    ) -> Result<Self, CoreError> {
        if tokens.is_empty() {
            return Err(CoreError::InvalidResponse("empty token sequence".into()));
        }
        if !logprob_old.is_finite() || !logprob_ref.is_finite() {
            return Err(CoreError::InvalidResponse(format!(
                "non-finite log-probabilities: old={logprob_old}, ref={logprob_ref}"
            )));
        }
        Ok(Response {
            tokens,
            text,
            logprob_old,
            logprob_ref,
        })
    }
}

/// All rollouts drawn for one (possibly permuted) variant of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub input: TaskInstance,
    /// Encoded policy input (query tokens with image token blocks spliced
    /// in), cached so loss evaluation conditions each ratio on this group's
    /// own input.
    pub input_tokens: Vec<TokenId>,
    pub permutation: Permutation,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        input: TaskInstance,
        input_tokens: Vec<TokenId>,
        permutation: Permutation,
        responses: Vec<Response>,
        rewards: Vec<f64>,
    ) -> Result<Self, CoreError> {
        if responses.is_empty() {
            return Err(CoreError::InvalidGroup("no responses".into()));
        }
        if responses.len() != rewards.len() {
            return Err(CoreError::InvalidGroup(format!(
                "{} responses but {} rewards",
                responses.len(),
                rewards.len()
            )));
        }
        if permutation.len() != input.images.len() {
            return Err(CoreError::InvalidGroup(format!(
                "permutation over {} positions for {} images",
                permutation.len(),
                input.images.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(CoreError::InvalidGroup("non-finite reward".into()));
        }
        Ok(RolloutGroup {
            input,
            input_tokens,
            permutation,
            responses,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Checks the reward-range invariant against the configured maximum
    /// attainable reward.
    pub fn validate_reward_bound(&self, max_reward: f64) -> Result<(), CoreError> {
        for &r in &self.rewards {
            if !(0.0..=max_reward).contains(&r) {
                return Err(CoreError::InvalidGroup(format!(
                    "reward {r} outside [0, {max_reward}]"
                )));
            }
        }
        Ok(())
    }
}

/// A sample's groups with their shared baseline and normalized advantages.
/// Built by `grpo::merged_advantages`; `advantages[g][k]` aligns with
/// `groups[g].responses[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedBatch {
    pub groups: Vec<RolloutGroup>,
    pub baseline: f64,
    pub advantages: Vec<Vec<f64>>,
}

impl MergedBatch {
    pub fn rollout_count(&self) -> usize {
        self.groups.iter().map(RolloutGroup::len).sum()
    }

    pub fn flat_advantages(&self) -> impl Iterator<Item = f64> + '_ {
        self.advantages.iter().flatten().copied()
    }
}

/// How a training step normalizes advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// One baseline over all of a sample's groups (original plus permuted).
    #[default]
    Merged,
    /// Each group normalized against its own mean and spread.
    PerGroup,
}

/// Granularity of the permutation coin flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoinScope {
    /// Independent flip for every permuted slot of every sample.
    #[default]
    PerSample,
    /// One flip per step decides for the whole batch.
    PerBatch,
}

/// Reward weighting; see the reward module for scoring semantics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub w_accuracy: f64,
    pub w_format: f64,
    /// When true, accuracy only counts if the format check passes; when
    /// false the two components are independent and additive.
    pub gate_accuracy_on_format: bool,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            w_accuracy: 1.0,
            w_format: 0.1,
            gate_accuracy_on_format: false,
        }
    }
}

impl RewardWeights {
    pub fn max_total(&self) -> f64 {
        self.w_accuracy + self.w_format
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.w_accuracy.is_finite() && self.w_format.is_finite())
            || self.w_accuracy < 0.0
            || self.w_format < 0.0
        {
            return Err(CoreError::InvalidConfig(format!(
                "reward weights must be finite and non-negative, got acc={} fmt={}",
                self.w_accuracy, self.w_format
            )));
        }
        Ok(())
    }
}

/// Full training configuration. Defaults are desk-scale: a toy policy on the
/// synthetic environment. The group-relative hyperparameters (six rollouts
/// per group, one permuted group, beta 0.01, clip 0.2, linearly decaying
/// permutation probability starting at 1) mirror the setup this framework
/// reproduces; the learning rate is raised to 1e-2 because the toy policy is
/// several orders of magnitude smaller than a production model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub seed: u64,
    /// Total optimization steps. When `None`, derived from `epochs`.
    pub t_max: Option<usize>,
    /// Passes over the dataset; used only when `t_max` is `None`.
    pub epochs: Option<usize>,
    pub batch_size: usize,
    /// Rollouts per group (`n`).
    pub rollouts_per_group: usize,
    /// Additional permuted groups per sample (`n_s`); 0 recovers plain
    /// group-relative training.
    pub permuted_groups: usize,
    /// Initial permutation probability; decays linearly to 0 at `t_max`.
    pub alpha0: f64,
    /// KL penalty coefficient.
    pub beta: f64,
    /// Ratio clipping half-width.
    pub clip_eps: f64,
    pub learning_rate: f64,
    /// Zero-variance guard: when the reward spread is at or below this,
    /// advantages are exactly zero.
    pub epsilon_std: f64,
    pub reward: RewardWeights,
    pub loss_mode: LossMode,
    pub coin_scope: CoinScope,
    pub max_response_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    /// Geometric position weight for the pooled input context; 1.0 makes the
    /// policy order-blind by construction.
    pub position_decay: f64,
    /// Steps between checkpoint rewrites; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Steps between permutation-gap evaluations; 0 disables them.
    pub gap_eval_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            seed: 0,
            t_max: Some(200),
            epochs: None,
            batch_size: 16,
            rollouts_per_group: 6,
            permuted_groups: 1,
            alpha0: 1.0,
            beta: 0.01,
            clip_eps: 0.2,
            learning_rate: 1e-2,
            epsilon_std: 1e-8,
            reward: RewardWeights::default(),
            loss_mode: LossMode::Merged,
            coin_scope: CoinScope::PerSample,
            max_response_len: 5,
            embed_dim: 8,
            hidden_dim: 16,
            init_scale: 0.05,
            position_decay: 0.9,
            checkpoint_every: 0,
            gap_eval_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let fail = |detail: String| Err(CoreError::InvalidConfig(detail));
        if self.t_max.is_none() && self.epochs.is_none() {
            return fail("one of t_max or epochs must be set".into());
        }
        if self.t_max == Some(0) || self.epochs == Some(0) {
            return fail("t_max and epochs must be positive when set".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.rollouts_per_group < 1 {
            return fail("rollouts_per_group must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha0) {
            return fail(format!("alpha0 {} outside [0, 1]", self.alpha0));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return fail(format!("beta {} must be finite and non-negative", self.beta));
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return fail(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return fail(format!("learning_rate {} invalid", self.learning_rate));
        }
        if !(self.epsilon_std.is_finite() && self.epsilon_std >= 0.0) {
            return fail(format!("epsilon_std {} invalid", self.epsilon_std));
        }
        if self.max_response_len == 0 {
            return fail("max_response_len must be at least 1".into());
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return fail("embed_dim and hidden_dim must be positive".into());
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return fail(format!("init_scale {} invalid", self.init_scale));
        }
        if !(self.position_decay.is_finite()
            && self.position_decay > 0.0
            && self.position_decay <= 1.0)
        {
            return fail(format!("position_decay {} outside (0, 1]", self.position_decay));
        }
        self.reward.validate()?;
        Ok(())
    }

    /// Steps this configuration runs for a dataset of `dataset_len` samples.
    pub fn total_steps(&self, dataset_len: usize) -> Result<usize, CoreError> {
        if let Some(t) = self.t_max {
            return Ok(t);
        }
        let epochs = self
            .epochs
            .ok_or_else(|| CoreError::InvalidConfig("neither t_max nor epochs set".into()))?;
        if dataset_len == 0 {
            return Err(CoreError::InvalidConfig(
                "epoch-based schedule over an empty dataset".into(),
            ));
        }
        Ok(epochs * dataset_len.div_ceil(self.batch_size))
    }

    /// Stable fingerprint of the configuration, used to guard resumes.
    pub fn config_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let encoded = serde_json::to_string(self).expect("config is always serializable");
        let digest = Sha256::digest(encoded.as_bytes());
        hex::encode(digest)
    }
}

impl fmt::Display for OrderSensitivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderSensitivity::OrderInvariant => write!(f, "order_invariant"),
            OrderSensitivity::PositionReferencing => write!(f, "position_referencing"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perm(mapping: &[usize]) -> Permutation {
        Permutation::new(mapping.to_vec()).unwrap()
    }

    #[test]
    fn compose_matches_hand_worked_example() {
        // Applying p = [1,0,2] then q = [2,1,0] must equal applying the
        // composite in one shot; the composite works out to [2,0,1].
        let p = perm(&[1, 0, 2]);
        let q = perm(&[2, 1, 0]);
        let composed = p.compose(&q).unwrap();
        assert_eq!(composed.mapping, vec![2, 0, 1]);

        let items = ["a", "b", "c"];
        let after_p: Vec<&str> = p.mapping.iter().map(|&j| items[j]).collect();
        let after_pq: Vec<&str> = q.mapping.iter().map(|&j| after_p[j]).collect();
        let direct: Vec<&str> = composed.mapping.iter().map(|&j| items[j]).collect();
        assert_eq!(after_pq, direct);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let sigma = perm(&[1, 2, 0]);
        assert_eq!(sigma.inverse().mapping, vec![2, 0, 1]);
        assert!(sigma.compose(&sigma.inverse()).unwrap().is_identity());
        assert!(sigma.inverse().compose(&sigma).unwrap().is_identity());
    }

    #[test]
    fn enumerate_yields_all_distinct_bijections() {
        for n in 0..=4 {
            let all = Permutation::enumerate(n);
            let expected: usize = (1..=n.max(1)).product();
            assert_eq!(all.len(), expected);
            assert!(all[0].is_identity());
            let distinct: BTreeSet<Vec<usize>> =
                all.iter().map(|p| p.mapping.clone()).collect();
            assert_eq!(distinct.len(), all.len());
            for p in &all {
                p.validate().unwrap();
            }
        }
    }

    #[test]
    fn bijection_validation_rejects_repeats_and_out_of_range() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
        assert!(Permutation::new(vec![2, 0, 1]).is_ok());
    }

    #[test]
    fn unapplied_identity_invariant_enforced() {
        let bad = Permutation {
            mapping: vec![1, 0],
            applied: false,
        };
        assert!(bad.validate().is_err());
        assert!(Permutation::identity(4).validate().is_ok());
        // An identity mapping built through `new` is marked unapplied.
        assert!(!perm(&[0, 1, 2]).applied);
        assert!(perm(&[1, 0, 2]).applied);
    }

    fn toy_instance() -> TaskInstance {
        TaskInstance {
            id: "t0".into(),
            query_tokens: vec![
                QueryToken::Text("simref".into()),
                QueryToken::Image,
                QueryToken::Text("opts".into()),
                QueryToken::Image,
                QueryToken::Image,
            ],
            images: (0..3)
                .map(|j| ImageDescriptor {
                    image_id: format!("img{j}"),
                    features: vec![j as f64, 1.0],
                    token_block: vec![format!("v{j}")],
                })
                .collect(),
            answer: Answer::choice("A", vec![1, 2]),
            answer_space: AnswerSpace::Choices(vec!["A".into(), "B".into()]),
            order_sensitivity: OrderSensitivity::PositionReferencing,
            difficulty_score: None,
            extra: serde_json::Map::new(),
        }
    }

    #[test]
    fn apply_identity_changes_only_the_id() {
        let x = toy_instance();
        let sigma = Permutation::identity(3);
        let y = apply_permutation(&x, &sigma).unwrap();
        assert_eq!(y.id, "t0#p0-1-2");
        let mut y_stripped = y.clone();
        y_stripped.id = x.id.clone();
        assert_eq!(y_stripped, x);
    }

    #[test]
    fn apply_moves_content_not_structure() {
        let x = toy_instance();
        let sigma = perm(&[0, 2, 1]);
        let y = apply_permutation(&x, &sigma).unwrap();
        assert_eq!(y.images[1].image_id, "img2");
        assert_eq!(y.images[2].image_id, "img1");
        assert_eq!(y.answer, x.answer);
        assert_eq!(y.query_tokens, x.query_tokens);
        // Applying twice undoes the swap.
        let z = apply_permutation(&y, &sigma).unwrap();
        assert_eq!(z.images, x.images);
    }

    #[test]
    fn apply_rejects_length_mismatch() {
        let x = toy_instance();
        assert!(apply_permutation(&x, &perm(&[1, 0])).is_err());
    }

    #[test]
    fn instance_validation_catches_structural_errors() {
        let ok = toy_instance();
        assert!(ok.validate().is_ok());

        let mut missing_marker = ok.clone();
        missing_marker.query_tokens.pop();
        assert!(matches!(
            missing_marker.validate(),
            Err(CoreError::MarkerMismatch { .. })
        ));

        let mut bad_answer = ok.clone();
        bad_answer.answer.value = "C".into();
        assert!(matches!(
            bad_answer.validate(),
            Err(CoreError::AnswerNotInSpace { .. })
        ));

        let mut bad_score = ok.clone();
        bad_score.difficulty_score = Some(1.5);
        assert!(bad_score.validate().is_err());

        let mut bad_refs = ok;
        bad_refs.answer.choice_image_refs = Some(vec![1, 1]);
        assert!(bad_refs.validate().is_err());
    }

    #[test]
    fn answer_canonicalization_folds_case_and_numbers() {
        assert_eq!(Answer::choice(" b ", vec![]).canonical_value(), "B");
        assert_eq!(Answer::short_text("02").canonical_value(), "2");
        assert_eq!(Answer::short_text(" Cat ").canonical_value(), "cat");
        assert!(Answer::short_text("2").matches(&Answer::short_text("02")));
        assert!(!Answer::short_text("2").matches(&Answer::short_text("3")));
        // Kinds must agree even when the text matches.
        assert!(!Answer::choice("2", vec![]).matches(&Answer::short_text("2")));
    }

    #[test]
    fn answer_space_membership_is_canonical() {
        let space = AnswerSpace::Choices(vec!["A".into(), "B".into()]);
        assert!(space.contains(&Answer {
            kind: AnswerKind::ChoiceLabel,
            value: "a".into(),
            choice_image_refs: None,
        }));
        assert_eq!(space.index_of("b"), Some(1));
        assert_eq!(space.index_of("C"), None);
    }

    #[test]
    fn response_and_group_constructors_validate() {
        assert!(Response::new(vec![], "".into(), 0.0, 0.0).is_err());
        assert!(Response::new(vec![1], "x".into(), f64::NAN, 0.0).is_err());
        let resp = Response::new(vec![1, 2], "x y".into(), -1.0, -1.1).unwrap();
        let x = toy_instance();
        let group = RolloutGroup::new(
            x.clone(),
            vec![0, 1],
            Permutation::identity(3),
            vec![resp.clone()],
            vec![0.5],
        )
        .unwrap();
        assert!(group.validate_reward_bound(1.1).is_ok());
        assert!(group.validate_reward_bound(0.4).is_err());
        assert!(RolloutGroup::new(
            x.clone(),
            vec![0, 1],
            Permutation::identity(3),
            vec![resp.clone()],
            vec![0.5, 0.5],
        )
        .is_err());
        assert!(
            RolloutGroup::new(x, vec![0, 1], Permutation::identity(2), vec![resp], vec![0.5])
                .is_err()
        );
    }

    #[test]
    fn trainer_config_validation_and_steps() {
        let cfg = TrainerConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.total_steps(100).unwrap(), 200);

        let mut by_epochs = cfg.clone();
        by_epochs.t_max = None;
        by_epochs.epochs = Some(3);
        assert_eq!(by_epochs.total_steps(100).unwrap(), 3 * 7);

        let mut bad = cfg.clone();
        bad.clip_eps = 0.0;
        assert!(bad.validate().is_err());

        let mut none_set = cfg;
        none_set.t_max = None;
        none_set.epochs = None;
        assert!(none_set.validate().is_err());
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainerConfig::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.beta = 0.02;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
