//! The training loop.
//!
//! Each step freezes the behavior policy, samples a group of responses per
//! task — plus extra groups whose image order was reshuffled under a
//! decaying schedule — scores them, normalizes rewards into advantages,
//! and applies one clipped policy-gradient update. Every random draw comes
//! from a stream derived from the master seed and structural labels
//! (step, task, group, rollout), so a run is a pure function of
//! (config, dataset): reruns and interrupted-then-resumed runs produce
//! byte-identical metrics streams.

pub mod gap;
pub mod metrics;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::dataset_fingerprint;
use crate::env::{
    encode_instance, random_mappable_permutation, transform_answer, EnvError, Vocab,
};
use crate::grpo::{build_advantages, evaluate_batch_with_grad, GrpoError, LossConfig};
use crate::policy::{
    init_params, sample, ArchConfig, PolicyError, PolicyParams, PolicySnapshots,
};
use crate::reward::score_for_instance;
use crate::rng::{
    derive_rng, STREAM_BATCH_COIN, STREAM_BUILD_GROUPS, STREAM_ROLLOUT, STREAM_SHUFFLE,
};
use crate::types::{
    apply_permutation, CoinScope, CoreError, Permutation, Response, RolloutGroup, TaskInstance,
    TokenId, TrainerConfig,
};

use gap::{build_gap_eval_set, permutation_gap, GapPair};
use metrics::{
    append_metrics, count_metrics_lines, diversity_proxy, truncate_metrics, AdvantageSummary,
    MetricsError, StepMetrics,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Held-out pairs used for the in-loop order-robustness evaluation.
pub const GAP_EVAL_MAX_PAIRS: usize = 64;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("no task in the dataset admits a usable reordering")]
    EmptyEvalSet,
    #[error("non-finite loss or gradient at step {step}; parameters left untouched")]
    NonFinite { step: usize },
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint io at {path}: {detail}")]
    CheckpointIo { path: String, detail: String },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn ckpt_io(path: &Path, e: std::io::Error) -> TrainerError {
    TrainerError::CheckpointIo {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

/// Probability of reordering a group's images at step `t`: starts at
/// `alpha0` and decays linearly to zero at `total_steps`, never negative.
pub fn schedule_alpha(alpha0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    alpha0 * (1.0 - step as f64 / total_steps as f64).max(0.0)
}

/// One group's prepared input: the (possibly reordered) task, its encoded
/// tokens, and the reordering that produced it.
#[derive(Debug, Clone)]
pub struct GroupPlan {
    pub instance: TaskInstance,
    pub input_tokens: Vec<TokenId>,
    pub permutation: Permutation,
}

/// The groups planned for one task in one step.
#[derive(Debug, Clone)]
pub struct BuiltGroups {
    /// Slot 0 is always the untouched original.
    pub plans: Vec<GroupPlan>,
    /// Extra slots whose input was actually reordered.
    pub permuted: usize,
    /// Extra slots that fell back to an identity copy.
    pub passthrough: usize,
}

/// Plans `permuted_groups + 1` groups for `x`: the original plus extra slots
/// that, with probability `alpha` each (or uniformly per batch when
/// `batch_coin` is set), receive a reordered copy with a consistently
/// relabeled answer. Slots whose coin comes up tails — or whose task admits
/// no answer-preserving reordering — fall back to an identity copy, keeping
/// group counts and rollout budgets fixed.
#[allow(clippy::too_many_arguments)]
pub fn build_groups(
    x: &TaskInstance,
    permuted_groups: usize,
    alpha: f64,
    batch_coin: Option<bool>,
    vocab: &Vocab,
    seed: u64,
    step: u64,
    sample_label: u64,
) -> Result<BuiltGroups, TrainerError> {
    let base_tokens = encode_instance(x, vocab)?;
    let n_images = x.images.len();
    let mut plans = Vec::with_capacity(permuted_groups + 1);
    plans.push(GroupPlan {
        instance: x.clone(),
        input_tokens: base_tokens.clone(),
        permutation: Permutation::identity(n_images),
    });
    let mut permuted = 0usize;
    let mut passthrough = 0usize;
    for slot in 1..=permuted_groups {
        let mut rng = derive_rng(seed, &[STREAM_BUILD_GROUPS, step, sample_label, slot as u64]);
        let fire = match batch_coin {
            Some(b) => b,
            None => rng.random::<f64>() < alpha,
        };
        let reordered = if fire {
            random_mappable_permutation(x, &mut rng)
        } else {
            None
        };
        match reordered {
            Some(sigma) => {
                let answer = transform_answer(&x.answer, &sigma, x)?;
                let mut instance = apply_permutation(x, &sigma)?;
                instance.answer = answer;
                let input_tokens = encode_instance(&instance, vocab)?;
                permuted += 1;
                plans.push(GroupPlan {
                    instance,
                    input_tokens,
                    permutation: sigma,
                });
            }
            None => {
                passthrough += 1;
                plans.push(GroupPlan {
                    instance: x.clone(),
                    input_tokens: base_tokens.clone(),
                    permutation: Permutation::identity(n_images),
                });
            }
        }
    }
    Ok(BuiltGroups {
        plans,
        permuted,
        passthrough,
    })
}

/// Serialized training state sufficient to continue a run exactly.
///
/// The behavior snapshot is not stored: it is refreshed from the learner at
/// the top of every step, so on resume `old = current` reproduces it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub data_hash: String,
    pub master_seed: u64,
    /// Number of fully completed steps.
    pub step: usize,
    pub current: PolicyParams,
    pub reference: PolicyParams,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Stop after completing this many steps in this call (simulates an
    /// interrupt); `None` runs to the end of the schedule.
    pub stop_after: Option<usize>,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Steps completed by this call (not counting earlier resumed ones).
    pub steps_completed: usize,
    /// Step counter after the call.
    pub step: usize,
    pub total_steps: usize,
    pub final_mean_reward: Option<f64>,
    /// Last in-loop order-robustness gap, when that evaluation ran.
    pub final_gap: Option<f64>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainerConfig,
    vocab: Vocab,
    dataset: Vec<TaskInstance>,
    pub snapshots: PolicySnapshots,
    step: usize,
    total_steps: usize,
    config_hash: String,
    data_hash: String,
}

fn arch_for(config: &TrainerConfig, vocab: &Vocab) -> ArchConfig {
    ArchConfig {
        vocab_size: vocab.size(),
        embed_dim: config.embed_dim,
        hidden_dim: config.hidden_dim,
        max_response_len: config.max_response_len,
        position_decay: config.position_decay,
        init_scale: config.init_scale,
        eos_token: vocab.eos_id(),
    }
}

impl Trainer {
    pub fn new(
        config: TrainerConfig,
        vocab: Vocab,
        dataset: Vec<TaskInstance>,
    ) -> Result<Self, TrainerError> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(TrainerError::EmptyDataset);
        }
        for x in &dataset {
            x.validate()?;
        }
        let total_steps = config.total_steps(dataset.len())?;
        let params = init_params(arch_for(&config, &vocab), config.seed)?;
        let config_hash = config.config_hash();
        let data_hash = dataset_fingerprint(&dataset);
        Ok(Trainer {
            config,
            vocab,
            dataset,
            snapshots: PolicySnapshots::new(params),
            step: 0,
            total_steps,
            config_hash,
            data_hash,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dataset(&self) -> &[TaskInstance] {
        &self.dataset
    }

    /// Completed steps so far.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// The dataset indices making up step `t`'s batch: each epoch reshuffles
    /// the dataset with its own derived stream and slices it into
    /// consecutive batches, so every task is visited once per epoch.
    fn batch_indices(&self, t: usize) -> Vec<usize> {
        let len = self.dataset.len();
        let steps_per_epoch = len.div_ceil(self.config.batch_size);
        let epoch = t / steps_per_epoch;
        let slot = t % steps_per_epoch;
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = derive_rng(self.config.seed, &[STREAM_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let start = slot * self.config.batch_size;
        let end = (start + self.config.batch_size).min(len);
        order[start..end].to_vec()
    }

    /// Runs one optimization step and returns its metrics. On any error —
    /// including a non-finite loss or gradient — parameters and the step
    /// counter are left untouched.
    pub fn train_step(&mut self) -> Result<StepMetrics, TrainerError> {
        let started = Instant::now();
        let t = self.step;
        let seed = self.config.seed;
        let alpha = schedule_alpha(self.config.alpha0, t, self.total_steps);
        self.snapshots.refresh_old();
        let batch_coin = match self.config.coin_scope {
            CoinScope::PerSample => None,
            CoinScope::PerBatch => {
                let mut rng = derive_rng(seed, &[STREAM_BATCH_COIN, t as u64]);
                Some(rng.random::<f64>() < alpha)
            }
        };
        let indices = self.batch_indices(t);
        let loss_cfg = LossConfig::from(&self.config);

        let mut grad = vec![0.0; self.snapshots.current.theta.len()];
        let mut surrogate_sum = 0.0;
        let mut kl_sum = 0.0;
        let mut objective_sum = 0.0;
        let mut clipped_rollouts = 0usize;
        let mut total_rollouts = 0usize;
        let mut advantage_values = Vec::new();
        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        let mut reward_orig_sum = 0.0;
        let mut reward_orig_count = 0usize;
        let mut reward_perm_sum = 0.0;
        let mut reward_perm_count = 0usize;
        let mut diversity_sum = 0.0;
        let mut diversity_count = 0usize;
        let mut permuted_groups = 0usize;
        let mut passthrough_groups = 0usize;

        for &di in &indices {
            let x = &self.dataset[di];
            let built = build_groups(
                x,
                self.config.permuted_groups,
                alpha,
                batch_coin,
                &self.vocab,
                seed,
                t as u64,
                di as u64,
            )?;
            permuted_groups += built.permuted;
            passthrough_groups += built.passthrough;

            let mut groups = Vec::with_capacity(built.plans.len());
            for (g, plan) in built.plans.into_iter().enumerate() {
                let n = self.config.rollouts_per_group;
                let mut responses = Vec::with_capacity(n);
                let mut rewards = Vec::with_capacity(n);
                let mut token_seqs = Vec::with_capacity(n);
                for k in 0..n {
                    let mut rng = derive_rng(
                        seed,
                        &[STREAM_ROLLOUT, t as u64, di as u64, g as u64, k as u64],
                    );
                    let drawn = sample(
                        &self.snapshots.old,
                        &self.snapshots.reference,
                        &plan.input_tokens,
                        &mut rng,
                        &self.vocab,
                    )?;
                    let breakdown = score_for_instance(&drawn.text, &plan.instance, &self.config.reward);
                    reward_sum += breakdown.total;
                    reward_count += 1;
                    if plan.permutation.applied {
                        reward_perm_sum += breakdown.total;
                        reward_perm_count += 1;
                    } else {
                        reward_orig_sum += breakdown.total;
                        reward_orig_count += 1;
                    }
                    token_seqs.push(drawn.tokens.clone());
                    responses.push(Response::new(
                        drawn.tokens,
                        drawn.text,
                        drawn.logprob_behavior,
                        drawn.logprob_reference,
                    )?);
                    rewards.push(breakdown.total);
                }
                if let Some(d) = diversity_proxy(&token_seqs) {
                    diversity_sum += d;
                    diversity_count += 1;
                }
                groups.push(RolloutGroup::new(
                    plan.instance,
                    plan.input_tokens,
                    plan.permutation,
                    responses,
                    rewards,
                )?);
            }

            let batch = build_advantages(groups, self.config.loss_mode, self.config.epsilon_std)?;
            let (report, sample_grad) =
                evaluate_batch_with_grad(&self.snapshots.current, &batch, &loss_cfg)?;
            surrogate_sum += report.surrogate;
            kl_sum += report.kl;
            objective_sum += report.objective;
            for diag in &report.per_rollout {
                if diag.clipped {
                    clipped_rollouts += 1;
                }
                advantage_values.push(diag.advantage);
                total_rollouts += 1;
            }
            for (acc, g) in grad.iter_mut().zip(&sample_grad) {
                *acc += g;
            }
        }

        let samples = indices.len() as f64;
        for g in grad.iter_mut() {
            *g /= samples;
        }
        let objective = objective_sum / samples;
        if !objective.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainerError::NonFinite { step: t });
        }
        self.snapshots
            .current
            .update(&grad, self.config.learning_rate)?;
        self.step += 1;

        Ok(StepMetrics {
            step: t,
            alpha,
            mean_reward: reward_sum / reward_count as f64,
            mean_reward_original: reward_orig_sum / reward_orig_count as f64,
            mean_reward_permuted: if reward_perm_count > 0 {
                Some(reward_perm_sum / reward_perm_count as f64)
            } else {
                None
            },
            surrogate: surrogate_sum / samples,
            kl: kl_sum / samples,
            objective,
            fraction_clipped: clipped_rollouts as f64 / total_rollouts as f64,
            advantages: AdvantageSummary::from_values(&advantage_values),
            rollout_diversity: if diversity_count > 0 {
                Some(diversity_sum / diversity_count as f64)
            } else {
                None
            },
            permutation_gap: None,
            permuted_groups,
            passthrough_groups,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }

    fn write_checkpoint(&self, path: &Path) -> Result<(), TrainerError> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            data_hash: self.data_hash.clone(),
            master_seed: self.config.seed,
            step: self.step,
            current: self.snapshots.current.clone(),
            reference: self.snapshots.reference.clone(),
        };
        let body = serde_json::to_string_pretty(&ckpt).expect("checkpoint is always serializable");
        // Write-then-rename so an interrupt never leaves a torn checkpoint.
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, body).map_err(|e| ckpt_io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| ckpt_io(path, e))?;
        Ok(())
    }

    /// Runs until the schedule ends (or `stop_after` steps complete),
    /// appending one metrics line per step and keeping a rolling checkpoint.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunSummary, TrainerError> {
        std::fs::create_dir_all(&opts.out_dir).map_err(|e| ckpt_io(&opts.out_dir, e))?;
        let metrics_path = opts.out_dir.join(METRICS_FILE);
        let checkpoint_path = opts.out_dir.join(CHECKPOINT_FILE);
        // The stream must already be aligned with the step counter: a fresh
        // run starts with no file, a resumed one was truncated by `resume`.
        let existing = count_metrics_lines(&metrics_path)?;
        if existing != self.step {
            return Err(TrainerError::CheckpointMismatch(format!(
                "metrics stream has {existing} lines but training is at step {}",
                self.step
            )));
        }
        let gap_pairs: Vec<GapPair> = if self.config.gap_eval_every > 0 {
            build_gap_eval_set(&self.dataset, &self.vocab, self.config.seed, GAP_EVAL_MAX_PAIRS)?
        } else {
            Vec::new()
        };

        let mut steps_completed = 0usize;
        let mut final_mean_reward = None;
        let mut final_gap = None;
        while self.step < self.total_steps {
            if let Some(limit) = opts.stop_after {
                if steps_completed >= limit {
                    break;
                }
            }
            let mut m = self.train_step()?;
            let gap_due = self.config.gap_eval_every > 0
                && !gap_pairs.is_empty()
                && (self.step.is_multiple_of(self.config.gap_eval_every)
                    || self.step == self.total_steps);
            if gap_due {
                let report = permutation_gap(&self.snapshots.current, &self.vocab, &gap_pairs)?;
                m.permutation_gap = Some(report.gap);
                final_gap = Some(report.gap);
            }
            append_metrics(&metrics_path, &m)?;
            final_mean_reward = Some(m.mean_reward);
            steps_completed += 1;
            if self.config.checkpoint_every > 0
                && self.step.is_multiple_of(self.config.checkpoint_every)
            {
                self.write_checkpoint(&checkpoint_path)?;
            }
        }
        self.write_checkpoint(&checkpoint_path)?;
        Ok(RunSummary {
            steps_completed,
            step: self.step,
            total_steps: self.total_steps,
            final_mean_reward,
            final_gap,
            metrics_path,
            checkpoint_path,
        })
    }

    /// Rebuilds a trainer from `out_dir`'s checkpoint, verifying that the
    /// configuration, dataset, and format still match, and truncating any
    /// metrics lines written after the checkpoint so the stream continues
    /// exactly where the restored state left off.
    pub fn resume(
        config: TrainerConfig,
        vocab: Vocab,
        dataset: Vec<TaskInstance>,
        out_dir: &Path,
    ) -> Result<Trainer, TrainerError> {
        let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
        let body = std::fs::read_to_string(&checkpoint_path)
            .map_err(|e| ckpt_io(&checkpoint_path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&body).map_err(|e| {
            TrainerError::CheckpointMismatch(format!("unreadable checkpoint: {e}"))
        })?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(TrainerError::CheckpointMismatch(format!(
                "format version {} (this build reads {})",
                ckpt.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        let mut trainer = Trainer::new(config, vocab, dataset)?;
        if ckpt.config_hash != trainer.config_hash {
            return Err(TrainerError::CheckpointMismatch(
                "configuration changed since the checkpoint was written".into(),
            ));
        }
        if ckpt.data_hash != trainer.data_hash {
            return Err(TrainerError::CheckpointMismatch(
                "dataset changed since the checkpoint was written".into(),
            ));
        }
        if ckpt.step > trainer.total_steps {
            return Err(TrainerError::CheckpointMismatch(format!(
                "checkpoint step {} exceeds the schedule's {} steps",
                ckpt.step, trainer.total_steps
            )));
        }
        if ckpt.current.arch != trainer.snapshots.current.arch {
            return Err(TrainerError::CheckpointMismatch(
                "checkpoint was written for a different architecture".into(),
            ));
        }
        ckpt.current.validate()?;
        ckpt.reference.validate()?;
        trainer.snapshots = PolicySnapshots {
            old: ckpt.current.clone(),
            reference: ckpt.reference,
            current: ckpt.current,
        };
        trainer.step = ckpt.step;
        let metrics_path = out_dir.join(METRICS_FILE);
        let kept = truncate_metrics(&metrics_path, trainer.step)?;
        if kept < trainer.step {
            return Err(TrainerError::CheckpointMismatch(format!(
                "metrics stream has only {kept} lines but the checkpoint is at step {}",
                trainer.step
            )));
        }
        Ok(trainer)
    }
}
