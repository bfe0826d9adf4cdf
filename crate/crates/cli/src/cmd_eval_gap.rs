//! `permrl eval-gap`: order-sensitivity evaluation of a trained checkpoint.
//!
//! Builds (original, reordered) pairs with consistently relabeled answers
//! from the given dataset, then reports greedy accuracy on each side and
//! their difference. A positive gap means the policy leans on image order.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use permrl_core::dataset::read_dataset;
use permrl_core::trainer::gap::{build_gap_eval_set, permutation_gap};
use permrl_core::trainer::{Checkpoint, CHECKPOINT_FILE, CHECKPOINT_FORMAT_VERSION};

use crate::meta::{read_meta, vocab_of};

#[derive(Debug, Args)]
pub struct EvalGapArgs {
    /// Evaluation record file, read together with its .meta.json sidecar
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory holding a checkpoint.json
    #[arg(long, env = "PERMRL_OUT_DIR", required_unless_present = "checkpoint")]
    pub run_dir: Option<PathBuf>,
    /// Explicit checkpoint file; overrides --run-dir
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Seed for choosing each pair's reordering
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest number of evaluation pairs to build
    #[arg(long, default_value_t = 64)]
    pub max_pairs: usize,
    /// Print the report as a JSON object instead of text
    #[arg(long)]
    pub json: bool,
}

pub fn run(args: EvalGapArgs) -> anyhow::Result<()> {
    let ckpt_path = match (&args.checkpoint, &args.run_dir) {
        (Some(file), _) => file.clone(),
        (None, Some(dir)) => dir.join(CHECKPOINT_FILE),
        (None, None) => bail!("pass --checkpoint or --run-dir"),
    };
    let body = std::fs::read_to_string(&ckpt_path)
        .with_context(|| format!("reading {}", ckpt_path.display()))?;
    let ckpt: Checkpoint =
        serde_json::from_str(&body).with_context(|| format!("parsing {}", ckpt_path.display()))?;
    if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
        bail!(
            "{} has format version {} (this build reads {})",
            ckpt_path.display(),
            ckpt.format_version,
            CHECKPOINT_FORMAT_VERSION
        );
    }

    let meta = read_meta(&args.data)?;
    let vocab = vocab_of(&meta)?;
    let data = read_dataset(&args.data).context("reading the evaluation dataset")?;
    let pairs = build_gap_eval_set(&data, &vocab, args.seed, args.max_pairs)
        .context("building evaluation pairs")?;
    if pairs.is_empty() {
        bail!("no instance in {} admits a usable reordering", args.data.display());
    }
    let report = permutation_gap(&ckpt.current, &vocab, &pairs).context("evaluating the gap")?;
    if args.json {
        println!(
            "{}",
            serde_json::json!({
                "pairs": report.pairs,
                "accuracy_original": report.accuracy_original,
                "accuracy_permuted": report.accuracy_permuted,
                "gap": report.gap,
                "checkpoint_step": ckpt.step,
            })
        );
    } else {
        println!(
            "{} pairs at step {}: accuracy {:.4} original vs {:.4} reordered; gap {:+.4}",
            report.pairs, ckpt.step, report.accuracy_original, report.accuracy_permuted, report.gap
        );
    }
    Ok(())
}
