//! Synthetic interleaved multi-image environment.
//!
//! Images are feature vectors; their "pixels" reach the policy as short
//! token blocks produced by uniform bucket quantization of each feature
//! dimension. Three task families cover the order-sensitivity spectrum:
//!
//! * `ReferenceComparison` — "which option is most similar to the reference
//!   image?" The reference sits at a fixed anchor position; choice labels
//!   point at the option positions. Reordering images changes the answer.
//! * `AttributeExtremum` — "which image scores highest on the first
//!   feature?" Every position is a choice; reordering relabels the answer.
//! * `Counting` — "how many images have a positive first feature?" The
//!   answer is order-invariant.
//!
//! Every generated instance carries enough structure for a ground-truth
//! oracle to re-derive its answer, including after any reordering of its
//! images; [`transform_answer`] is the cheap rule that tracks the answer
//! across a reordering without re-running the oracle, and the central law of
//! this module is that the two always agree wherever the rule applies.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_rng, STREAM_GENERATE};
use crate::types::{
    Answer, AnswerKind, AnswerSpace, CoreError, ImageDescriptor, OrderSensitivity, Permutation,
    QueryToken, TaskInstance, TokenId,
};

/// Keyword opening a reference-comparison question.
pub const KW_REFERENCE: &str = "simref";
/// Keyword opening an attribute-extremum question.
pub const KW_EXTREMUM: &str = "argmax";
/// Keyword opening a counting question.
pub const KW_COUNTING: &str = "countgt";
/// Separator between the reference image and the option images.
pub const KW_OPTIONS: &str = "opts";

/// End-of-sequence token string; also conditions the first generated step.
pub const EOS_TOKEN: &str = "<eos>";
pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

const CHOICE_LETTERS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

/// Letter label for choice slot `i`.
pub fn choice_letter(i: usize) -> &'static str {
    CHOICE_LETTERS[i]
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("token {token:?} is not in the vocabulary")]
    UnknownToken { token: String },
    #[error("token id {id} is out of vocabulary range {size}")]
    TokenIdOutOfRange { id: TokenId, size: usize },
    #[error("instance {id}: first query token {got:?} names no known task family")]
    UnknownTemplate { id: String, got: String },
    #[error("image {image_id} has no token block; retokenize the instance first")]
    MissingTokenBlock { image_id: String },
    #[error("expected {expected} feature dimensions, image {image_id} has {got}")]
    FeatureDim {
        image_id: String,
        expected: usize,
        got: usize,
    },
    #[error("could not meet margin {margin} for template {template} after {attempts} attempts")]
    MarginUnreachable {
        template: String,
        margin: f64,
        attempts: usize,
    },
    #[error("generator configuration invalid: {0}")]
    BadGeneratorConfig(String),
    #[error("instance {id}: {detail}")]
    MalformedTask { id: String, detail: String },
    #[error("instance {id}: answer is ambiguous: {detail}")]
    AmbiguousTask { id: String, detail: String },
    #[error("answer cannot be mapped across this permutation: {reason}")]
    UnmappableAnswer { reason: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Sizing knobs for the vocabulary. The defaults lay out exactly 32 tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    /// Number of choice letters with boxed-answer tokens (A, B, ...).
    pub choice_labels: usize,
    /// Largest count answer; boxed tokens cover 0..=max_count.
    pub max_count: usize,
    /// Free-text filler tokens the policy may emit inside think spans.
    pub filler_words: usize,
    /// Feature dimensions per image.
    pub feature_dim: usize,
    /// Quantization buckets per feature dimension.
    pub feature_buckets: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            choice_labels: 4,
            max_count: 4,
            filler_words: 8,
            feature_dim: 2,
            feature_buckets: 4,
        }
    }
}

impl VocabConfig {
    pub fn size(&self) -> usize {
        // eos + think pair + boxed letters + boxed counts + keywords
        // + filler + feature tokens
        1 + 2
            + self.choice_labels
            + (self.max_count + 1)
            + 4
            + self.filler_words
            + self.feature_dim * self.feature_buckets
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.choice_labels < 2 || self.choice_labels > CHOICE_LETTERS.len() {
            return Err(EnvError::BadGeneratorConfig(format!(
                "choice_labels must be in 2..={}, got {}",
                CHOICE_LETTERS.len(),
                self.choice_labels
            )));
        }
        if self.max_count == 0 {
            return Err(EnvError::BadGeneratorConfig("max_count must be positive".into()));
        }
        if self.feature_dim == 0 || self.feature_buckets < 2 {
            return Err(EnvError::BadGeneratorConfig(
                "feature_dim must be positive and feature_buckets at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed token table: id 0 is end-of-sequence, followed by the think pair,
/// boxed answers, question keywords, filler words, and feature-bucket
/// tokens. Construction is deterministic in the config.
#[derive(Debug, Clone)]
pub struct Vocab {
    config: VocabConfig,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    boxed_label_base: usize,
    boxed_count_base: usize,
    filler_base: usize,
    feature_base: usize,
}

impl Vocab {
    pub fn new(config: VocabConfig) -> Result<Self, EnvError> {
        config.validate()?;
        let mut tokens = Vec::with_capacity(config.size());
        tokens.push(EOS_TOKEN.to_string());
        tokens.push(THINK_OPEN.to_string());
        tokens.push(THINK_CLOSE.to_string());
        let boxed_label_base = tokens.len();
        for i in 0..config.choice_labels {
            tokens.push(format!("\\boxed{{{}}}", choice_letter(i)));
        }
        let boxed_count_base = tokens.len();
        for k in 0..=config.max_count {
            tokens.push(format!("\\boxed{{{k}}}"));
        }
        for kw in [KW_REFERENCE, KW_EXTREMUM, KW_COUNTING, KW_OPTIONS] {
            tokens.push(kw.to_string());
        }
        let filler_base = tokens.len();
        for i in 0..config.filler_words {
            tokens.push(format!("w{i}"));
        }
        let feature_base = tokens.len();
        for d in 0..config.feature_dim {
            for b in 0..config.feature_buckets {
                tokens.push(format!("f{d}b{b}"));
            }
        }
        debug_assert_eq!(tokens.len(), config.size());
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Ok(Vocab {
            config,
            tokens,
            index,
            boxed_label_base,
            boxed_count_base,
            filler_base,
            feature_base,
        })
    }

    pub fn config(&self) -> &VocabConfig {
        &self.config
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> TokenId {
        0
    }

    pub fn think_open_id(&self) -> TokenId {
        1
    }

    pub fn think_close_id(&self) -> TokenId {
        2
    }

    pub fn boxed_label_id(&self, label: usize) -> TokenId {
        debug_assert!(label < self.config.choice_labels);
        (self.boxed_label_base + label) as TokenId
    }

    pub fn boxed_count_id(&self, count: usize) -> TokenId {
        debug_assert!(count <= self.config.max_count);
        (self.boxed_count_base + count) as TokenId
    }

    pub fn filler_id(&self, i: usize) -> TokenId {
        debug_assert!(i < self.config.filler_words);
        (self.filler_base + i) as TokenId
    }

    pub fn feature_token_id(&self, dim: usize, bucket: usize) -> TokenId {
        debug_assert!(dim < self.config.feature_dim && bucket < self.config.feature_buckets);
        (self.feature_base + dim * self.config.feature_buckets + bucket) as TokenId
    }

    pub fn encode(&self, token: &str) -> Result<TokenId, EnvError> {
        self.index.get(token).copied().ok_or_else(|| EnvError::UnknownToken {
            token: token.to_string(),
        })
    }

    pub fn decode(&self, id: TokenId) -> Result<&str, EnvError> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(EnvError::TokenIdOutOfRange {
                id,
                size: self.tokens.len(),
            })
    }

    /// Display text for a sampled sequence: tokens joined by spaces with the
    /// end-of-sequence token omitted.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            if id == self.eos_id() {
                continue;
            }
            match self.decode(id) {
                Ok(tok) => parts.push(tok),
                Err(_) => parts.push("<unk>"),
            }
        }
        parts.join(" ")
    }

    /// Uniform bucket index of one feature value over [-1, 1].
    pub fn bucket(&self, value: f64) -> usize {
        let b = self.config.feature_buckets as f64;
        let scaled = ((value + 1.0) / 2.0 * b).floor();
        (scaled.max(0.0) as usize).min(self.config.feature_buckets - 1)
    }

    /// Deterministic token block for a feature vector: one bucket token per
    /// dimension.
    pub fn token_block(&self, image_id: &str, features: &[f64]) -> Result<Vec<String>, EnvError> {
        if features.len() != self.config.feature_dim {
            return Err(EnvError::FeatureDim {
                image_id: image_id.to_string(),
                expected: self.config.feature_dim,
                got: features.len(),
            });
        }
        Ok(features
            .iter()
            .enumerate()
            .map(|(d, &v)| self.tokens[self.feature_token_id(d, self.bucket(v)) as usize].clone())
            .collect())
    }
}

impl crate::policy::Detokenizer for Vocab {
    fn detokenize(&self, ids: &[TokenId]) -> String {
        Vocab::detokenize(self, ids)
    }
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

/// Splices each image's token block into the query at its placeholder.
/// Purely structural; fails if a block is missing rather than guessing.
pub fn tokenize(x: &TaskInstance) -> Result<Vec<String>, EnvError> {
    let mut out = Vec::new();
    let mut next_image = 0usize;
    for token in &x.query_tokens {
        match token {
            QueryToken::Text(s) => out.push(s.clone()),
            QueryToken::Image => {
                let image = &x.images[next_image];
                next_image += 1;
                if image.token_block.is_empty() {
                    return Err(EnvError::MissingTokenBlock {
                        image_id: image.image_id.clone(),
                    });
                }
                out.extend(image.token_block.iter().cloned());
            }
        }
    }
    Ok(out)
}

/// Recomputes every image's token block from its features.
pub fn retokenize_instance(x: &mut TaskInstance, vocab: &Vocab) -> Result<(), EnvError> {
    for image in &mut x.images {
        image.token_block = vocab.token_block(&image.image_id, &image.features)?;
    }
    Ok(())
}

/// Tokenizes and encodes an instance into policy input ids.
pub fn encode_instance(x: &TaskInstance, vocab: &Vocab) -> Result<Vec<TokenId>, EnvError> {
    tokenize(x)?.iter().map(|t| vocab.encode(t)).collect()
}

// ---------------------------------------------------------------------------
// Task structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    ReferenceComparison,
    AttributeExtremum,
    Counting,
}

impl TemplateKind {
    pub fn keyword(self) -> &'static str {
        match self {
            TemplateKind::ReferenceComparison => KW_REFERENCE,
            TemplateKind::AttributeExtremum => KW_EXTREMUM,
            TemplateKind::Counting => KW_COUNTING,
        }
    }
}

/// Task family recognized from an instance's leading keyword.
pub fn template_kind_of(x: &TaskInstance) -> Result<TemplateKind, EnvError> {
    let got = x
        .query_tokens
        .first()
        .map(|t| t.surface().to_string())
        .unwrap_or_default();
    match got.as_str() {
        KW_REFERENCE => Ok(TemplateKind::ReferenceComparison),
        KW_EXTREMUM => Ok(TemplateKind::AttributeExtremum),
        KW_COUNTING => Ok(TemplateKind::Counting),
        _ => Err(EnvError::UnknownTemplate { id: x.id.clone(), got }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub kind: TemplateKind,
    pub num_images: usize,
    /// Choice count for choice-based kinds; ignored for counting tasks.
    pub num_choices: usize,
}

impl TaskTemplate {
    pub fn reference_comparison(num_images: usize) -> Self {
        TaskTemplate {
            kind: TemplateKind::ReferenceComparison,
            num_images,
            num_choices: num_images.saturating_sub(1),
        }
    }

    pub fn attribute_extremum(num_images: usize) -> Self {
        TaskTemplate {
            kind: TemplateKind::AttributeExtremum,
            num_images,
            num_choices: num_images,
        }
    }

    pub fn counting(num_images: usize) -> Self {
        TaskTemplate {
            kind: TemplateKind::Counting,
            num_images,
            num_choices: 0,
        }
    }

    pub fn validate(&self, vocab: &VocabConfig) -> Result<(), EnvError> {
        let fail = |detail: String| Err(EnvError::BadGeneratorConfig(detail));
        match self.kind {
            TemplateKind::ReferenceComparison => {
                if self.num_images < 3 {
                    return fail(format!(
                        "reference comparison needs at least 3 images, got {}",
                        self.num_images
                    ));
                }
                if self.num_choices != self.num_images - 1 {
                    return fail(format!(
                        "reference comparison over {} images must have {} choices, got {}",
                        self.num_images,
                        self.num_images - 1,
                        self.num_choices
                    ));
                }
            }
            TemplateKind::AttributeExtremum => {
                if self.num_images < 2 {
                    return fail("attribute extremum needs at least 2 images".into());
                }
                if self.num_choices != self.num_images {
                    return fail(format!(
                        "attribute extremum must label every image: {} images, {} choices",
                        self.num_images, self.num_choices
                    ));
                }
            }
            TemplateKind::Counting => {
                if self.num_images == 0 {
                    return fail("counting needs at least 1 image".into());
                }
                if self.num_images > vocab.max_count {
                    return fail(format!(
                        "counting over {} images exceeds max_count {}",
                        self.num_images, vocab.max_count
                    ));
                }
            }
        }
        if matches!(
            self.kind,
            TemplateKind::ReferenceComparison | TemplateKind::AttributeExtremum
        ) && self.num_choices > vocab.choice_labels
        {
            return fail(format!(
                "{} choices exceed the {} available labels",
                self.num_choices, vocab.choice_labels
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedTemplate {
    pub template: TaskTemplate,
    pub weight: f64,
}

/// Generator settings. `margin` is the minimum ground-truth separation: the
/// gap that must hold between the winning option and the runner-up (or, for
/// counting, between every feature and the threshold) so that every answer
/// is unambiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub dataset_size: usize,
    pub margin: f64,
    /// Rejection-sampling budget per instance before generation fails.
    pub max_retries: usize,
    pub templates: Vec<WeightedTemplate>,
    pub vocab: VocabConfig,
    /// Probability of arranging a reference-comparison instance so that the
    /// correct option occupies the first option slot. 0 keeps the sampled
    /// (uniform) arrangement; 1 plants a maximal positional shortcut.
    pub correct_first_bias: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let vocab = VocabConfig::default();
        GeneratorConfig {
            seed: 0,
            dataset_size: 128,
            margin: 0.2,
            max_retries: 1000,
            templates: vec![
                WeightedTemplate {
                    template: TaskTemplate::reference_comparison(3),
                    weight: 0.4,
                },
                WeightedTemplate {
                    template: TaskTemplate::attribute_extremum(3),
                    weight: 0.3,
                },
                WeightedTemplate {
                    template: TaskTemplate::counting(3),
                    weight: 0.3,
                },
            ],
            vocab,
            correct_first_bias: 0.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.vocab.validate()?;
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(EnvError::BadGeneratorConfig(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.max_retries == 0 {
            return Err(EnvError::BadGeneratorConfig("max_retries must be positive".into()));
        }
        if self.templates.is_empty() {
            return Err(EnvError::BadGeneratorConfig("no templates configured".into()));
        }
        for wt in &self.templates {
            wt.template.validate(&self.vocab)?;
            if !(wt.weight.is_finite() && wt.weight > 0.0) {
                return Err(EnvError::BadGeneratorConfig(format!(
                    "template weight must be positive, got {}",
                    wt.weight
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.correct_first_bias) {
            return Err(EnvError::BadGeneratorConfig(format!(
                "correct_first_bias {} outside [0, 1]",
                self.correct_first_bias
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-9 || nb < 1e-9 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

fn sample_features(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reference-comparison feature sets must keep all pairwise cosine
/// similarities that share an endpoint separated by the margin, so the
/// most-similar option stays unique no matter which image ends up in the
/// anchor slot.
fn reference_set_ok(features: &[Vec<f64>], margin: f64) -> bool {
    let m = features.len();
    let mut sims = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in (i + 1)..m {
            match cosine(&features[i], &features[j]) {
                Some(s) => {
                    sims[i][j] = s;
                    sims[j][i] = s;
                }
                None => return false,
            }
        }
    }
    for (anchor, row) in sims.iter().enumerate() {
        for i in 0..m {
            for j in (i + 1)..m {
                if i == anchor || j == anchor {
                    continue;
                }
                if (row[i] - row[j]).abs() < margin {
                    return false;
                }
            }
        }
    }
    true
}

fn extremum_set_ok(features: &[Vec<f64>], margin: f64) -> bool {
    let mut scores: Vec<f64> = features.iter().map(|f| f[0]).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    scores[0] - scores[1] >= margin
}

fn counting_set_ok(features: &[Vec<f64>], margin: f64) -> bool {
    features.iter().all(|f| f[0].abs() >= margin)
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn generate_one(
    cfg: &GeneratorConfig,
    vocab: &Vocab,
    template: &TaskTemplate,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance, EnvError> {
    let m = template.num_images;
    let dim = cfg.vocab.feature_dim;
    let accept: fn(&[Vec<f64>], f64) -> bool = match template.kind {
        TemplateKind::ReferenceComparison => reference_set_ok,
        TemplateKind::AttributeExtremum => extremum_set_ok,
        TemplateKind::Counting => counting_set_ok,
    };
    let mut features: Option<Vec<Vec<f64>>> = None;
    for _ in 0..cfg.max_retries {
        let candidate: Vec<Vec<f64>> = (0..m).map(|_| sample_features(rng, dim)).collect();
        if accept(&candidate, cfg.margin) {
            features = Some(candidate);
            break;
        }
    }
    let mut features = features.ok_or_else(|| EnvError::MarginUnreachable {
        template: format!("{:?}", template.kind),
        margin: cfg.margin,
        attempts: cfg.max_retries,
    })?;

    let (query_tokens, answer, answer_space, order_sensitivity) = match template.kind {
        TemplateKind::ReferenceComparison => {
            let k = template.num_choices;
            // features[0] is the reference; slots 1..=k hold the options.
            let sims: Vec<f64> = (1..m)
                .map(|i| cosine(&features[0], &features[i]).expect("norms checked"))
                .collect();
            let mut correct_slot = argmax(&sims);
            if cfg.correct_first_bias > 0.0 && rng.random::<f64>() < cfg.correct_first_bias {
                features.swap(1, 1 + correct_slot);
                correct_slot = 0;
            }
            let labels: Vec<String> = (0..k).map(|i| choice_letter(i).to_string()).collect();
            let refs: Vec<usize> = (1..=k).collect();
            let mut query = vec![QueryToken::Text(KW_REFERENCE.into()), QueryToken::Image];
            query.push(QueryToken::Text(KW_OPTIONS.into()));
            query.extend(std::iter::repeat_with(|| QueryToken::Image).take(k));
            (
                query,
                Answer::choice(choice_letter(correct_slot), refs),
                AnswerSpace::Choices(labels),
                OrderSensitivity::PositionReferencing,
            )
        }
        TemplateKind::AttributeExtremum => {
            let scores: Vec<f64> = features.iter().map(|f| f[0]).collect();
            let correct = argmax(&scores);
            let labels: Vec<String> = (0..m).map(|i| choice_letter(i).to_string()).collect();
            let refs: Vec<usize> = (0..m).collect();
            let mut query = vec![QueryToken::Text(KW_EXTREMUM.into())];
            query.extend(std::iter::repeat_with(|| QueryToken::Image).take(m));
            (
                query,
                Answer::choice(choice_letter(correct), refs),
                AnswerSpace::Choices(labels),
                OrderSensitivity::PositionReferencing,
            )
        }
        TemplateKind::Counting => {
            let count = features.iter().filter(|f| f[0] > 0.0).count();
            let values: Vec<String> = (0..=m).map(|c| c.to_string()).collect();
            let mut query = vec![QueryToken::Text(KW_COUNTING.into())];
            query.extend(std::iter::repeat_with(|| QueryToken::Image).take(m));
            (
                query,
                Answer::short_text(count.to_string()),
                AnswerSpace::ShortTexts(values),
                OrderSensitivity::OrderInvariant,
            )
        }
    };

    let images: Vec<ImageDescriptor> = features
        .into_iter()
        .enumerate()
        .map(|(j, f)| {
            let image_id = format!("{id}-img{j}");
            let token_block = vocab.token_block(&image_id, &f)?;
            Ok(ImageDescriptor {
                image_id,
                features: f,
                token_block,
            })
        })
        .collect::<Result<_, EnvError>>()?;

    let x = TaskInstance {
        id,
        query_tokens,
        images,
        answer,
        answer_space,
        order_sensitivity,
        difficulty_score: None,
        extra: serde_json::Map::new(),
    };
    x.validate()?;
    Ok(x)
}

/// Generates a dataset deterministically from the config's seed: the same
/// config yields byte-identical records.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Vec<TaskInstance>, EnvError> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.vocab)?;
    let total_weight: f64 = cfg.templates.iter().map(|w| w.weight).sum();
    let mut out = Vec::with_capacity(cfg.dataset_size);
    for i in 0..cfg.dataset_size {
        let mut rng = derive_rng(cfg.seed, &[STREAM_GENERATE, i as u64]);
        let mut pick = rng.random::<f64>() * total_weight;
        let mut chosen = &cfg.templates[cfg.templates.len() - 1].template;
        for wt in &cfg.templates {
            if pick < wt.weight {
                chosen = &wt.template;
                break;
            }
            pick -= wt.weight;
        }
        out.push(generate_one(cfg, &vocab, chosen, format!("task-{i:06}"), &mut rng)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ground truth, order semantics, answer remapping
// ---------------------------------------------------------------------------

/// Re-derives the correct answer from an instance's current image
/// arrangement. Works on permuted instances too, which is what makes it the
/// reference point for [`transform_answer`].
pub fn oracle_answer(x: &TaskInstance) -> Result<Answer, EnvError> {
    match template_kind_of(x)? {
        TemplateKind::ReferenceComparison => {
            let refs = x.choice_positions().ok_or_else(|| EnvError::MalformedTask {
                id: x.id.clone(),
                detail: "reference comparison without choice refs".into(),
            })?;
            let anchors = anchor_positions(x);
            if anchors.len() != 1 {
                return Err(EnvError::MalformedTask {
                    id: x.id.clone(),
                    detail: format!("expected one anchor position, found {anchors:?}"),
                });
            }
            let anchor = *anchors.iter().next().unwrap();
            let mut best: Option<(usize, f64)> = None;
            let mut runner_up = f64::NEG_INFINITY;
            for (slot, &pos) in refs.iter().enumerate() {
                let sim = cosine(&x.images[anchor].features, &x.images[pos].features)
                    .ok_or_else(|| EnvError::AmbiguousTask {
                        id: x.id.clone(),
                        detail: "degenerate feature vector".into(),
                    })?;
                match best {
                    Some((_, s)) if sim <= s => {
                        if sim > runner_up {
                            runner_up = sim;
                        }
                    }
                    Some((_, s)) => {
                        runner_up = s;
                        best = Some((slot, sim));
                    }
                    None => best = Some((slot, sim)),
                }
            }
            let (slot, sim) = best.ok_or_else(|| EnvError::MalformedTask {
                id: x.id.clone(),
                detail: "no options".into(),
            })?;
            if sim == runner_up {
                return Err(EnvError::AmbiguousTask {
                    id: x.id.clone(),
                    detail: "two options tie for most similar".into(),
                });
            }
            Ok(Answer::choice(
                x.answer_space.values()[slot].clone(),
                refs.to_vec(),
            ))
        }
        TemplateKind::AttributeExtremum => {
            let refs = x.choice_positions().ok_or_else(|| EnvError::MalformedTask {
                id: x.id.clone(),
                detail: "extremum task without choice refs".into(),
            })?;
            let scores: Vec<f64> = refs.iter().map(|&p| x.images[p].features[0]).collect();
            let best = argmax(&scores);
            if scores.iter().filter(|&&s| s == scores[best]).count() > 1 {
                return Err(EnvError::AmbiguousTask {
                    id: x.id.clone(),
                    detail: "two images tie for the extremum".into(),
                });
            }
            Ok(Answer::choice(
                x.answer_space.values()[best].clone(),
                refs.to_vec(),
            ))
        }
        TemplateKind::Counting => {
            let count = x.images.iter().filter(|img| img.features[0] > 0.0).count();
            Ok(Answer::short_text(count.to_string()))
        }
    }
}

/// Image positions not pointed at by any choice label. The question text
/// pins these down directly (e.g. the reference slot), so an answer can only
/// be remapped across permutations that leave them alone.
pub fn anchor_positions(x: &TaskInstance) -> BTreeSet<usize> {
    match x.choice_positions() {
        Some(refs) => {
            let referenced: BTreeSet<usize> = refs.iter().copied().collect();
            (0..x.images.len()).filter(|p| !referenced.contains(p)).collect()
        }
        None => BTreeSet::new(),
    }
}

/// The semantic indicator S: true when reordering the images by `sigma`
/// leaves the intended answer unchanged. Order-invariant tasks always
/// preserve semantics; position-referencing tasks treat every position as
/// answer-referenced (choice slots plus anchors cover all of them), so only
/// the identity preserves semantics.
pub fn semantic_indicator(x: &TaskInstance, sigma: &Permutation) -> Result<bool, EnvError> {
    sigma.validate()?;
    if sigma.len() != x.images.len() {
        return Err(CoreError::PermutationLength {
            permutation: sigma.len(),
            images: x.images.len(),
        }
        .into());
    }
    Ok(match x.order_sensitivity {
        OrderSensitivity::OrderInvariant => true,
        OrderSensitivity::PositionReferencing => sigma.is_identity(),
    })
}

/// Maps the gold answer of `x` onto `apply_permutation(x, sigma)`:
/// the answer is kept verbatim when semantics are preserved and relabeled to
/// follow the originally-correct image otherwise. Errors rather than
/// guessing when no reliable relabeling exists (non-choice answers, or a
/// permutation that moves an anchor position).
pub fn transform_answer(
    y: &Answer,
    sigma: &Permutation,
    x: &TaskInstance,
) -> Result<Answer, EnvError> {
    let preserved = semantic_indicator(x, sigma)?;
    transform_answer_given(preserved, y, sigma, x)
}

/// [`transform_answer`] with the semantic indicator supplied externally,
/// e.g. by a wire judge instead of the built-in rule.
pub fn transform_answer_given(
    semantics_preserved: bool,
    y: &Answer,
    sigma: &Permutation,
    x: &TaskInstance,
) -> Result<Answer, EnvError> {
    sigma.validate()?;
    if sigma.len() != x.images.len() {
        return Err(CoreError::PermutationLength {
            permutation: sigma.len(),
            images: x.images.len(),
        }
        .into());
    }
    if semantics_preserved {
        return Ok(y.clone());
    }
    if y.kind != AnswerKind::ChoiceLabel {
        return Err(EnvError::UnmappableAnswer {
            reason: format!("no relabeling rule for {:?} answers", y.kind),
        });
    }
    let refs = y
        .choice_image_refs
        .as_deref()
        .or(x.choice_positions())
        .ok_or_else(|| EnvError::UnmappableAnswer {
            reason: "choice labels do not reference images".into(),
        })?;
    for anchor in anchor_positions(x) {
        if sigma.mapping[anchor] != anchor {
            return Err(EnvError::UnmappableAnswer {
                reason: format!(
                    "permutation moves position {anchor}, which the question references directly"
                ),
            });
        }
    }
    let label_idx = x
        .answer_space
        .index_of(&y.value)
        .ok_or_else(|| EnvError::UnmappableAnswer {
            reason: format!("answer {:?} not found in the answer space", y.value),
        })?;
    let original_pos = refs[label_idx];
    let new_pos = sigma
        .mapping
        .iter()
        .position(|&src| src == original_pos)
        .expect("validated bijection covers every source position");
    let new_idx = refs
        .iter()
        .position(|&r| r == new_pos)
        .ok_or_else(|| EnvError::UnmappableAnswer {
            reason: "the correct image left the labeled choice slots".into(),
        })?;
    Ok(Answer {
        kind: AnswerKind::ChoiceLabel,
        value: x.answer_space.values()[new_idx].clone(),
        choice_image_refs: Some(refs.to_vec()),
    })
}

/// Draws a uniformly random non-identity permutation whose transformed
/// answer is guaranteed to exist: anchors stay fixed and only labeled (or
/// order-invariant) positions move. `None` when no such permutation exists
/// (fewer than two movable positions).
pub fn random_mappable_permutation(
    x: &TaskInstance,
    rng: &mut ChaCha8Rng,
) -> Option<Permutation> {
    let n = x.images.len();
    if n < 2 {
        return None;
    }
    let movable: Vec<usize> = match x.order_sensitivity {
        OrderSensitivity::OrderInvariant => (0..n).collect(),
        OrderSensitivity::PositionReferencing => x.choice_positions()?.to_vec(),
    };
    if movable.len() < 2 {
        return None;
    }
    for _ in 0..64 {
        let mut shuffled = movable.clone();
        shuffled.shuffle(rng);
        if shuffled == movable {
            continue;
        }
        let mut mapping: Vec<usize> = (0..n).collect();
        for (slot, &src) in movable.iter().zip(shuffled.iter()) {
            mapping[*slot] = src;
        }
        return Some(Permutation::new(mapping).expect("constructed from a shuffle"));
    }
    None
}
