//! Group-relative policy optimization: advantages, clipped surrogate,
//! divergence penalty, and the batched objective with its analytic gradient.
//!
//! Sign conventions, fixed once here and relied on everywhere else:
//!
//! * The *objective* `J = surrogate − β·kl` is maximized.
//! * [`LossReport::loss`] is `−J`, the quantity a descent step minimizes;
//!   gradient functions return `∇(−J)` so callers always apply
//!   `θ ← θ − lr·g`.
//!
//! Advantages are group-relative: rewards standardized by their group's mean
//! and *population* standard deviation. With extra permuted groups per
//! sample, the merged mode standardizes every rollout against the grand mean
//! and spread pooled over all of the sample's groups, so a permutation that
//! breaks a positional shortcut shows up as signed advantage everywhere
//! instead of being renormalized away group by group.
//!
//! Importance ratios are sequence-level, `ρ = exp(logπ_cur − logπ_old)`,
//! with each rollout's log-probabilities conditioned on its own group's
//! (possibly permuted) input tokens. The divergence penalty uses the
//! low-variance nonnegative estimator `k(Δ) = e^Δ − Δ − 1` with
//! `Δ = logπ_ref − logπ_cur`; denominators are rollout counts, never token
//! counts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{self, PolicyError, PolicyParams};
use crate::types::{CoreError, LossMode, MergedBatch, RolloutGroup, TrainerConfig};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("no rollouts to compute advantages over")]
    Empty,
    #[error("non-finite {what} encountered at group {group}, rollout {rollout}")]
    NonFinite {
        what: &'static str,
        group: usize,
        rollout: usize,
    },
    #[error("advantage table shape does not match rollouts: {detail}")]
    ShapeMismatch { detail: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Surrogate and penalty hyperparameters, lifted out of [`TrainerConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Ratio clipping half-width ε.
    pub clip_eps: f64,
    /// Divergence penalty coefficient β.
    pub beta: f64,
    /// Degenerate-spread guard: a group (or pool) whose population standard
    /// deviation is at or below this yields exactly zero advantages.
    pub epsilon_std: f64,
}

impl From<&TrainerConfig> for LossConfig {
    fn from(cfg: &TrainerConfig) -> Self {
        LossConfig {
            clip_eps: cfg.clip_eps,
            beta: cfg.beta,
            epsilon_std: cfg.epsilon_std,
        }
    }
}

/// Sequential mean; fixed accumulation order keeps results reproducible.
fn mean(values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc += v;
    }
    acc / values.len() as f64
}

/// Population standard deviation (divide by n, not n − 1), sequential order.
fn population_std(values: &[f64], mean: f64) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        let d = v - mean;
        acc += d * d;
    }
    (acc / values.len() as f64).sqrt()
}

fn standardize(values: &[f64], center: f64, spread: f64, epsilon_std: f64) -> Vec<f64> {
    if spread <= epsilon_std {
        vec![0.0; values.len()]
    } else {
        values.iter().map(|&v| (v - center) / spread).collect()
    }
}

/// Group-relative advantages of one group's rewards: standardized by the
/// group's own mean and population spread, or identically zero when the
/// spread is degenerate.
pub fn group_advantages(rewards: &[f64], epsilon_std: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::Empty);
    }
    if let Some(pos) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite {
            what: "reward",
            group: 0,
            rollout: pos,
        });
    }
    let m = mean(rewards);
    let s = population_std(rewards, m);
    Ok(standardize(rewards, m, s, epsilon_std))
}

/// Grand mean reward pooled over every rollout of every group.
pub fn merged_baseline(groups: &[RolloutGroup]) -> Result<f64, GrpoError> {
    let flat = flat_rewards(groups)?;
    Ok(mean(&flat))
}

fn flat_rewards(groups: &[RolloutGroup]) -> Result<Vec<f64>, GrpoError> {
    let mut flat = Vec::new();
    for (g, group) in groups.iter().enumerate() {
        for (k, &r) in group.rewards.iter().enumerate() {
            if !r.is_finite() {
                return Err(GrpoError::NonFinite {
                    what: "reward",
                    group: g,
                    rollout: k,
                });
            }
            flat.push(r);
        }
    }
    if flat.is_empty() {
        return Err(GrpoError::Empty);
    }
    Ok(flat)
}

/// Builds a sample's advantage table under the requested normalization mode.
///
/// * [`LossMode::Merged`] pools all groups: one baseline (the grand mean)
///   and one spread standardize every rollout.
/// * [`LossMode::PerGroup`] standardizes each group against itself.
///
/// With a single group the two modes coincide exactly (bit for bit), which
/// is the reduction law the test suite pins down.
pub fn build_advantages(
    groups: Vec<RolloutGroup>,
    mode: LossMode,
    epsilon_std: f64,
) -> Result<MergedBatch, GrpoError> {
    let flat = flat_rewards(&groups)?;
    let baseline = mean(&flat);
    let advantages = match mode {
        LossMode::Merged => {
            let spread = population_std(&flat, baseline);
            groups
                .iter()
                .map(|g| standardize(&g.rewards, baseline, spread, epsilon_std))
                .collect()
        }
        LossMode::PerGroup => groups
            .iter()
            .map(|g| group_advantages(&g.rewards, epsilon_std))
            .collect::<Result<_, _>>()?,
    };
    Ok(MergedBatch {
        groups,
        baseline,
        advantages,
    })
}

/// Pooled-mode advantages; see [`build_advantages`].
pub fn merged_advantages(
    groups: Vec<RolloutGroup>,
    epsilon_std: f64,
) -> Result<MergedBatch, GrpoError> {
    build_advantages(groups, LossMode::Merged, epsilon_std)
}

/// One clipped-surrogate term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClippedTerm {
    pub value: f64,
    /// True exactly when the clipped branch is strictly smaller, i.e. the
    /// rollout's gradient through the surrogate is zero.
    pub clipped: bool,
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)`, the pessimistic policy-improvement term.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> ClippedTerm {
    let t1 = ratio * advantage;
    let t2 = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if t2 < t1 {
        ClippedTerm {
            value: t2,
            clipped: true,
        }
    } else {
        ClippedTerm {
            value: t1,
            clipped: false,
        }
    }
}

/// Nonnegative divergence estimate `e^Δ − Δ − 1` with
/// `Δ = logπ_ref − logπ_cur`; zero exactly when the two agree.
pub fn kl_penalty(logp_current: f64, logp_ref: f64) -> f64 {
    let delta = logp_ref - logp_current;
    delta.exp() - delta - 1.0
}

/// Per-rollout diagnostics recorded while evaluating the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutDiag {
    pub ratio: f64,
    pub advantage: f64,
    pub clipped: bool,
    pub kl: f64,
}

/// The evaluated objective for one sample's groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean clipped-surrogate term over all rollouts.
    pub surrogate: f64,
    /// Mean divergence penalty over all rollouts.
    pub kl: f64,
    /// `surrogate − β·kl`; the quantity being maximized.
    pub objective: f64,
    pub per_rollout: Vec<RolloutDiag>,
}

impl LossReport {
    /// The minimized quantity, `−objective`.
    pub fn loss(&self) -> f64 {
        -self.objective
    }

    pub fn fraction_clipped(&self) -> f64 {
        if self.per_rollout.is_empty() {
            return 0.0;
        }
        let clipped = self.per_rollout.iter().filter(|d| d.clipped).count();
        clipped as f64 / self.per_rollout.len() as f64
    }
}

fn check_shapes(batch: &MergedBatch) -> Result<(), GrpoError> {
    if batch.groups.is_empty() {
        return Err(GrpoError::Empty);
    }
    if batch.advantages.len() != batch.groups.len() {
        return Err(GrpoError::ShapeMismatch {
            detail: format!(
                "{} advantage rows for {} groups",
                batch.advantages.len(),
                batch.groups.len()
            ),
        });
    }
    for (g, (group, advs)) in batch.groups.iter().zip(&batch.advantages).enumerate() {
        if group.responses.len() != advs.len() {
            return Err(GrpoError::ShapeMismatch {
                detail: format!(
                    "group {g}: {} advantages for {} responses",
                    advs.len(),
                    group.responses.len()
                ),
            });
        }
    }
    Ok(())
}

/// Evaluates the objective of one sample's groups under `policy`, without a
/// gradient. Every rollout's current log-probability is conditioned on its
/// own group's input tokens.
pub fn evaluate_batch(
    policy_params: &PolicyParams,
    batch: &MergedBatch,
    cfg: &LossConfig,
) -> Result<LossReport, GrpoError> {
    evaluate_inner(policy_params, batch, cfg, false).map(|(report, _)| report)
}

/// [`evaluate_batch`] plus `∇(−J)` with respect to the policy parameters.
pub fn evaluate_batch_with_grad(
    policy_params: &PolicyParams,
    batch: &MergedBatch,
    cfg: &LossConfig,
) -> Result<(LossReport, Vec<f64>), GrpoError> {
    evaluate_inner(policy_params, batch, cfg, true)
        .map(|(report, grad)| (report, grad.expect("gradient requested")))
}

fn evaluate_inner(
    policy_params: &PolicyParams,
    batch: &MergedBatch,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>), GrpoError> {
    check_shapes(batch)?;
    let total_rollouts = batch.rollout_count();
    let inv_n = 1.0 / total_rollouts as f64;

    let mut surrogate_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut per_rollout = Vec::with_capacity(total_rollouts);
    let mut grad = if want_grad {
        Some(vec![0.0; policy_params.theta.len()])
    } else {
        None
    };

    for (g, (group, advs)) in batch.groups.iter().zip(&batch.advantages).enumerate() {
        for (k, (resp, &advantage)) in group.responses.iter().zip(advs).enumerate() {
            let non_finite = |what: &'static str| GrpoError::NonFinite {
                what,
                group: g,
                rollout: k,
            };
            let (logp_current, glp) = if want_grad {
                let (lp, gr) = policy::grad_logprob(policy_params, &group.input_tokens, &resp.tokens)?;
                (lp, Some(gr))
            } else {
                (
                    policy::logprob(policy_params, &group.input_tokens, &resp.tokens)?,
                    None,
                )
            };
            if !logp_current.is_finite() {
                return Err(non_finite("log-probability"));
            }
            let ratio = (logp_current - resp.logprob_old).exp();
            if !ratio.is_finite() {
                return Err(non_finite("importance ratio"));
            }
            let term = clipped_surrogate(ratio, advantage, cfg.clip_eps);
            let kl = kl_penalty(logp_current, resp.logprob_ref);
            if !term.value.is_finite() || !kl.is_finite() {
                return Err(non_finite("objective term"));
            }
            surrogate_sum += term.value;
            kl_sum += kl;
            per_rollout.push(RolloutDiag {
                ratio,
                advantage,
                clipped: term.clipped,
                kl,
            });

            if let Some(grad) = grad.as_mut() {
                // dJ/dlogπ for this rollout: the surrogate contributes ρ·A on
                // the unclipped branch and nothing on the clipped one; the
                // penalty contributes −β(1 − e^Δ).
                let delta = resp.logprob_ref - logp_current;
                let surrogate_coef = if term.clipped { 0.0 } else { ratio * advantage };
                let coef = surrogate_coef - cfg.beta * (1.0 - delta.exp());
                if !coef.is_finite() {
                    return Err(non_finite("gradient coefficient"));
                }
                // ∇(−J) accumulates −coef/N per rollout.
                let scale = -coef * inv_n;
                let glp = glp.expect("gradient path computes grad_logprob");
                for (gi, &gl) in grad.iter_mut().zip(&glp) {
                    *gi += scale * gl;
                }
            }
        }
    }

    let surrogate = surrogate_sum * inv_n;
    let kl = kl_sum * inv_n;
    let objective = surrogate - cfg.beta * kl;
    if !objective.is_finite() {
        return Err(GrpoError::NonFinite {
            what: "objective",
            group: 0,
            rollout: 0,
        });
    }
    if let Some(grad) = grad.as_ref() {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(GrpoError::NonFinite {
                what: "gradient",
                group: 0,
                rollout: 0,
            });
        }
    }
    Ok((
        LossReport {
            surrogate,
            kl,
            objective,
            per_rollout,
        },
        grad,
    ))
}
