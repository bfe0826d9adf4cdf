//! Per-step training metrics and their append-only JSONL stream.
//!
//! Every completed optimization step appends exactly one line. All recorded
//! fields are deterministic functions of the configuration, dataset, and
//! seed; wall-clock timing is kept in memory for display but excluded from
//! serialization so two runs of the same configuration produce byte-for-byte
//! identical streams — including a run that was interrupted and resumed.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::TokenId;

/// Advantages with magnitude below this carry almost no learning signal.
pub const NEAR_ZERO_ADVANTAGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("metrics line {line} is malformed: {detail}")]
    Malformed { line: usize, detail: String },
}

fn io_err(path: &Path, source: std::io::Error) -> MetricsError {
    MetricsError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Distribution summary of one step's advantages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Fraction with `|advantage| < 0.1`; a high value means most rollouts
    /// received effectively no gradient signal.
    pub near_zero_frac: f64,
}

impl AdvantageSummary {
    pub fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return AdvantageSummary {
                mean: 0.0,
                std: 0.0,
                min: 0.0,
                max: 0.0,
                near_zero_frac: 0.0,
            };
        }
        let n = values.len() as f64;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut near_zero = 0usize;
        for &v in values {
            sum += v;
            min = min.min(v);
            max = max.max(v);
            if v.abs() < NEAR_ZERO_ADVANTAGE {
                near_zero += 1;
            }
        }
        let mean = sum / n;
        let mut var = 0.0;
        for &v in values {
            let d = v - mean;
            var += d * d;
        }
        AdvantageSummary {
            mean,
            std: (var / n).sqrt(),
            min,
            max,
            near_zero_frac: near_zero as f64 / n,
        }
    }
}

/// One training step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// 0-based index of the completed step.
    pub step: usize,
    /// Permutation probability in effect this step.
    pub alpha: f64,
    /// Mean reward over every rollout of the batch.
    pub mean_reward: f64,
    /// Mean reward over rollouts whose group input was not reordered
    /// (original slots and passthrough copies).
    pub mean_reward_original: f64,
    /// Mean reward over rollouts with actually reordered inputs; absent
    /// when no permutation fired this step.
    pub mean_reward_permuted: Option<f64>,
    pub surrogate: f64,
    pub kl: f64,
    /// `surrogate − β·kl`, batch-averaged.
    pub objective: f64,
    pub fraction_clipped: f64,
    pub advantages: AdvantageSummary,
    /// Mean over groups of (1 − mean pairwise token-bigram overlap); absent
    /// when no group had at least two rollouts.
    pub rollout_diversity: Option<f64>,
    /// Accuracy drop from original to permuted inputs on the held-out pairs;
    /// present only on steps where the evaluation ran.
    pub permutation_gap: Option<f64>,
    /// Groups whose input was actually reordered this step.
    pub permuted_groups: usize,
    /// Permuted slots that fell back to an identity copy (coin came up
    /// tails or no usable permutation existed).
    pub passthrough_groups: usize,
    /// Wall-clock duration of the step; never serialized, so metric streams
    /// are reproducible byte for byte.
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Serialized form of one metrics line (no trailing newline).
pub fn metrics_line(m: &StepMetrics) -> String {
    serde_json::to_string(m).expect("metrics are always serializable")
}

/// Appends one line to the stream, creating the file if needed, and flushes
/// so an interrupt loses at most the step in flight.
pub fn append_metrics(path: &Path, m: &StepMetrics) -> Result<(), MetricsError> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut line = metrics_line(m);
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
    file.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Reads a whole metrics stream.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>, MetricsError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m = serde_json::from_str(&line).map_err(|e| MetricsError::Malformed {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// Number of non-empty lines in the stream; 0 for a missing file.
pub fn count_metrics_lines(path: &Path) -> Result<usize, MetricsError> {
    if !path.exists() {
        return Ok(0);
    }
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut count = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            count += 1;
        }
    }
    Ok(count)
}

/// Truncates the stream to its first `keep` lines (used when a checkpoint
/// is older than the metrics file, e.g. after a mid-step interrupt).
/// Returns the resulting line count.
pub fn truncate_metrics(path: &Path, keep: usize) -> Result<usize, MetricsError> {
    if !path.exists() {
        return Ok(0);
    }
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    if lines.len() <= keep {
        return Ok(lines.len());
    }
    lines.truncate(keep);
    let mut body = lines.join("\n");
    if !body.is_empty() {
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| io_err(path, e))?;
    Ok(keep)
}

fn bigrams(seq: &[TokenId]) -> BTreeSet<(TokenId, TokenId)> {
    seq.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Token-bigram overlap between two sequences: intersection over union of
/// their bigram sets, with two bigram-less sequences counting as identical.
pub fn bigram_jaccard(a: &[TokenId], b: &[TokenId]) -> f64 {
    let sa = bigrams(a);
    let sb = bigrams(b);
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let intersection = sa.intersection(&sb).count() as f64;
    let union = sa.union(&sb).count() as f64;
    intersection / union
}

/// How varied one group's rollouts are: `1 − mean pairwise bigram overlap`.
/// `None` for fewer than two rollouts, where the notion is undefined.
pub fn diversity_proxy(sequences: &[Vec<TokenId>]) -> Option<f64> {
    if sequences.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sequences.len() {
        for j in (i + 1)..sequences.len() {
            total += bigram_jaccard(&sequences[i], &sequences[j]);
            pairs += 1;
        }
    }
    Some(1.0 - total / pairs as f64)
}
