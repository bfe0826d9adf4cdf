//! `permrl report`: flatten a metrics stream into a tab-separated table
//! that plotting tools ingest directly. Optional values print as `NaN` so
//! every column stays numeric.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use permrl_core::trainer::metrics::{read_metrics, StepMetrics};

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// metrics.jsonl written by `permrl train`
    #[arg(long)]
    pub metrics: PathBuf,
    /// Write the table here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep every Nth step (the final step always stays)
    #[arg(long, default_value_t = 1)]
    pub every: usize,
}

const COLUMNS: [&str; 16] = [
    "step",
    "alpha",
    "mean_reward",
    "mean_reward_original",
    "mean_reward_permuted",
    "surrogate",
    "kl",
    "objective",
    "fraction_clipped",
    "adv_mean",
    "adv_std",
    "adv_near_zero_frac",
    "rollout_diversity",
    "permutation_gap",
    "permuted_groups",
    "passthrough_groups",
];

fn opt(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn row(m: &StepMetrics) -> String {
    let cells: [String; 16] = [
        m.step.to_string(),
        format!("{}", m.alpha),
        format!("{}", m.mean_reward),
        format!("{}", m.mean_reward_original),
        format!("{}", opt(m.mean_reward_permuted)),
        format!("{}", m.surrogate),
        format!("{}", m.kl),
        format!("{}", m.objective),
        format!("{}", m.fraction_clipped),
        format!("{}", m.advantages.mean),
        format!("{}", m.advantages.std),
        format!("{}", m.advantages.near_zero_frac),
        format!("{}", opt(m.rollout_diversity)),
        format!("{}", opt(m.permutation_gap)),
        m.permuted_groups.to_string(),
        m.passthrough_groups.to_string(),
    ];
    cells.join("\t")
}

pub fn table(metrics: &[StepMetrics], every: usize) -> String {
    let every = every.max(1);
    let mut out = String::new();
    out.push_str(&COLUMNS.join("\t"));
    out.push('\n');
    for (i, m) in metrics.iter().enumerate() {
        if i.is_multiple_of(every) || i + 1 == metrics.len() {
            let _ = writeln!(out, "{}", row(m));
        }
    }
    out
}

pub fn run(args: ReportArgs) -> anyhow::Result<()> {
    let metrics = read_metrics(&args.metrics)
        .with_context(|| format!("reading {}", args.metrics.display()))?;
    let body = table(&metrics, args.every);
    match &args.out {
        Some(path) => std::fs::write(path, body)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{body}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use permrl_core::trainer::metrics::AdvantageSummary;

    fn metric(step: usize) -> StepMetrics {
        StepMetrics {
            step,
            alpha: 1.0 - step as f64 / 10.0,
            mean_reward: 0.5,
            mean_reward_original: 0.5,
            mean_reward_permuted: step.is_multiple_of(2).then_some(0.25),
            surrogate: 0.0,
            kl: 0.1,
            objective: -0.01,
            fraction_clipped: 0.0,
            advantages: AdvantageSummary::from_values(&[1.0, -1.0]),
            rollout_diversity: None,
            permutation_gap: None,
            permuted_groups: 1,
            passthrough_groups: 0,
            wall_time_ms: 3.0,
        }
    }

    #[test]
    fn header_matches_rows_and_absent_values_print_as_nan() {
        let rows: Vec<StepMetrics> = (0..3).map(metric).collect();
        let text = table(&rows, 1);
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
        assert_eq!(header, COLUMNS);
        for line in lines {
            let cells: Vec<&str> = line.split('\t').collect();
            assert_eq!(cells.len(), COLUMNS.len());
            assert_eq!(cells[12], "NaN", "absent diversity prints as NaN");
        }
    }

    #[test]
    fn downsampling_always_keeps_the_last_step() {
        let rows: Vec<StepMetrics> = (0..5).map(metric).collect();
        let text = table(&rows, 3);
        let steps: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split('\t').next().unwrap())
            .collect();
        assert_eq!(steps, vec!["0", "3", "4"]);
    }
}
