//! Sweeps over the number of extra reordered groups per task.
//!
//! Comparing group counts is only fair when each configuration samples a
//! comparable amount of experience, so the default budget shrinks per-group
//! rollouts as the group count grows, holding the total rollouts per task
//! roughly constant.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::Vocab;
use crate::types::{TaskInstance, TrainerConfig};

use super::{RunOptions, RunSummary, Trainer, TrainerError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepBudget {
    /// Hold `(groups + 1) · rollouts_per_group` near the base total by
    /// shrinking rollouts per group (never below 1).
    FixedTotalRollouts,
    /// Hold rollouts per group fixed; total work grows with the group count.
    FixedPerGroup,
}

/// One planned configuration of the sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub permuted_groups: usize,
    pub config: TrainerConfig,
}

/// Derives one configuration per requested group count from `base`,
/// adjusting rollouts according to the budget rule.
pub fn plan_ns_sweep(
    base: &TrainerConfig,
    group_counts: &[usize],
    budget: SweepBudget,
) -> Result<Vec<SweepPoint>, TrainerError> {
    base.validate()?;
    let base_total = base.rollouts_per_group * (base.permuted_groups + 1);
    let mut points = Vec::with_capacity(group_counts.len());
    for &k in group_counts {
        let mut config = base.clone();
        config.permuted_groups = k;
        if budget == SweepBudget::FixedTotalRollouts {
            config.rollouts_per_group = (base_total / (k + 1)).max(1);
        }
        config.validate()?;
        points.push(SweepPoint {
            permuted_groups: k,
            config,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub permuted_groups: usize,
    pub rollouts_per_group: usize,
    pub out_dir: PathBuf,
    pub summary: RunSummary,
}

/// Trains every planned point from identical initial conditions, writing
/// each run into `out_dir/ns{K}/`.
pub fn run_ns_sweep(
    base: &TrainerConfig,
    group_counts: &[usize],
    budget: SweepBudget,
    vocab: &Vocab,
    dataset: &[TaskInstance],
    out_dir: &Path,
) -> Result<Vec<SweepOutcome>, TrainerError> {
    let points = plan_ns_sweep(base, group_counts, budget)?;
    let mut outcomes = Vec::with_capacity(points.len());
    for point in points {
        let sub = out_dir.join(format!("ns{}", point.permuted_groups));
        let rollouts_per_group = point.config.rollouts_per_group;
        let mut trainer = Trainer::new(point.config, vocab.clone(), dataset.to_vec())?;
        let summary = trainer.run(&RunOptions::new(&sub))?;
        outcomes.push(SweepOutcome {
            permuted_groups: point.permuted_groups,
            rollouts_per_group,
            out_dir: sub,
            summary,
        });
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_dataset, GeneratorConfig};
    use crate::trainer::metrics;
    use crate::trainer::METRICS_FILE;

    fn base_config() -> TrainerConfig {
        TrainerConfig {
            rollouts_per_group: 6,
            permuted_groups: 1,
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn fixed_total_budget_shrinks_rollouts_as_groups_grow() {
        let base = base_config(); // 6 rollouts × 2 groups = 12 total
        let points =
            plan_ns_sweep(&base, &[0, 1, 2, 3, 5, 23], SweepBudget::FixedTotalRollouts).unwrap();
        let rollouts: Vec<usize> = points.iter().map(|p| p.config.rollouts_per_group).collect();
        assert_eq!(rollouts, vec![12, 6, 4, 3, 2, 1], "12 / (k + 1), floored, at least 1");
        for p in &points {
            assert_eq!(p.config.permuted_groups, p.permuted_groups);
        }
    }

    #[test]
    fn fixed_per_group_budget_keeps_rollouts_unchanged() {
        let base = base_config();
        let points = plan_ns_sweep(&base, &[0, 2, 4], SweepBudget::FixedPerGroup).unwrap();
        for p in &points {
            assert_eq!(p.config.rollouts_per_group, 6);
        }
    }

    #[test]
    fn sweep_runs_each_point_into_its_own_directory() {
        let gen = GeneratorConfig {
            seed: 7,
            dataset_size: 4,
            ..GeneratorConfig::default()
        };
        let data = generate_dataset(&gen).unwrap();
        let vocab = Vocab::new(gen.vocab).unwrap();
        let base = TrainerConfig {
            seed: 3,
            t_max: Some(2),
            batch_size: 2,
            rollouts_per_group: 2,
            permuted_groups: 1,
            embed_dim: 4,
            hidden_dim: 6,
            ..TrainerConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let outcomes = run_ns_sweep(
            &base,
            &[0, 1],
            SweepBudget::FixedTotalRollouts,
            &vocab,
            &data,
            dir.path(),
        )
        .unwrap();
        assert_eq!(outcomes.len(), 2);
        for (outcome, expected_k) in outcomes.iter().zip([0usize, 1]) {
            assert_eq!(outcome.permuted_groups, expected_k);
            assert_eq!(outcome.out_dir, dir.path().join(format!("ns{expected_k}")));
            let lines = metrics::read_metrics(&outcome.out_dir.join(METRICS_FILE)).unwrap();
            assert_eq!(lines.len(), 2);
            assert_eq!(outcome.summary.steps_completed, 2);
        }
        // Equal budget: 4 total rollouts at both points.
        assert_eq!(outcomes[0].rollouts_per_group, 4);
        assert_eq!(outcomes[1].rollouts_per_group, 2);
    }
}
