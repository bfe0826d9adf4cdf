//! `permrl prep`: dataset preparation — structural filtering, difficulty
//! scoring with band filtering, and permutation augmentation.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::Args;
use permrl_core::dataset::{read_dataset, write_dataset};
use permrl_core::datapipe::judge::RuleJudge;
use permrl_core::datapipe::{
    augment_permute, filter_by_difficulty, rule_filter, score_difficulty, AugmentConfig,
    AugmentStats, DifficultyBand, DifficultyReport, FilterStats, PolicyRolloutScorer,
};
use permrl_core::policy::{init_params, ArchConfig};
use permrl_core::types::{RewardWeights, TrainerConfig};
use serde::Serialize;

use crate::cmd_train::trainer_reference;
use crate::layering::{overlay_file, unknown_keys};
use crate::meta::{read_meta, write_meta};

#[derive(Debug, Args)]
pub struct PrepArgs {
    /// Input record file, read together with its .meta.json sidecar
    #[arg(long)]
    pub input: PathBuf,
    /// Output record file
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the structural validity filter
    #[arg(long)]
    pub no_filter: bool,
    /// Skip difficulty scoring and band filtering
    #[arg(long)]
    pub no_difficulty: bool,
    /// Solve attempts per instance when scoring difficulty
    #[arg(long, default_value_t = 10)]
    pub attempts: usize,
    /// Lowest mean accuracy kept by the band filter (inclusive)
    #[arg(long, default_value_t = 0.1)]
    pub band_min: f64,
    /// Highest mean accuracy kept by the band filter (inclusive)
    #[arg(long, default_value_t = 0.8)]
    pub band_max: f64,
    /// Permuted variants to add per instance (0 disables augmentation)
    #[arg(long, default_value_t = 0)]
    pub variants: usize,
    /// Seed for scoring rollouts and augmentation draws
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML trainer configuration describing the scoring policy's
    /// architecture and init seed (defaults match `permrl train`)
    #[arg(long)]
    pub scorer_config: Option<PathBuf>,
}

/// Everything the run did, written next to the output records.
#[derive(Debug, Default, Serialize)]
struct PrepReport {
    filter: Option<FilterStats>,
    difficulty: Option<DifficultyReport>,
    augment: Option<AugmentStats>,
}

fn scorer_params_config(args: &PrepArgs) -> anyhow::Result<TrainerConfig> {
    let cfg = TrainerConfig::default();
    let Some(path) = &args.scorer_config else {
        return Ok(cfg);
    };
    let (merged, file) = overlay_file(&cfg, path)?;
    let unknown = unknown_keys(&file, &trainer_reference()?);
    if !unknown.is_empty() {
        bail!("{} sets unknown keys: {}", path.display(), unknown.join(", "));
    }
    Ok(merged)
}

fn histogram_lines(report: &DifficultyReport) -> String {
    let mut out = String::new();
    for (i, &count) in report.histogram.iter().enumerate() {
        let lo = i as f64 / 10.0;
        let hi = lo + 0.1;
        out.push_str(&format!(
            "  {lo:.1}..{hi:.1} | {:<40} {count}\n",
            "#".repeat(count.min(40))
        ));
    }
    out
}

pub fn run(args: PrepArgs) -> anyhow::Result<()> {
    let meta = read_meta(&args.input)?;
    let vocab = crate::meta::vocab_of(&meta)?;
    let mut data = read_dataset(&args.input).context("reading the input dataset")?;
    let mut report = PrepReport::default();

    if !args.no_filter {
        let (kept, stats) = rule_filter(data);
        println!(
            "rule filter: kept {}, dropped {} {:?}",
            stats.kept, stats.dropped, stats.reasons
        );
        data = kept;
        report.filter = Some(stats);
    }

    if !args.no_difficulty {
        let tc = scorer_params_config(&args)?;
        let arch = ArchConfig {
            vocab_size: vocab.size(),
            embed_dim: tc.embed_dim,
            hidden_dim: tc.hidden_dim,
            max_response_len: tc.max_response_len,
            position_decay: tc.position_decay,
            init_scale: tc.init_scale,
            eos_token: vocab.eos_id(),
        };
        let params = init_params(arch, tc.seed).context("initializing the scoring policy")?;
        let scorer = PolicyRolloutScorer {
            params: &params,
            vocab: &vocab,
            weights: RewardWeights::default(),
        };
        let mut difficulty = score_difficulty(&data, &scorer, args.attempts, args.seed)
            .context("scoring difficulty")?;
        let band = DifficultyBand {
            min: args.band_min,
            max: args.band_max,
        };
        let before = data.len();
        data = filter_by_difficulty(data, &mut difficulty, band);
        println!(
            "difficulty: mean {:.4} over {} attempts; band [{}, {}] kept {}/{} (mean {})",
            difficulty.mean_before,
            args.attempts,
            band.min,
            band.max,
            data.len(),
            before,
            difficulty
                .mean_after
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "-".into()),
        );
        print!("{}", histogram_lines(&difficulty));
        report.difficulty = Some(difficulty);
    }

    if args.variants > 0 {
        let (augmented, stats) = augment_permute(
            &data,
            &RuleJudge,
            AugmentConfig {
                seed: args.seed,
                variants_per_instance: args.variants,
            },
        );
        println!(
            "augmentation: {} originals + {} variants ({} unmappable, {} without usable reorderings)",
            stats.originals, stats.produced, stats.dropped_unmappable, stats.no_permutation
        );
        data = augmented;
        report.augment = Some(stats);
    }

    if data.is_empty() {
        log::warn!("preparation kept nothing; writing an empty dataset");
    }
    write_dataset(&args.out, &data).context("writing the prepared dataset")?;
    write_meta(&args.out, &meta)?;
    let report_path = {
        let mut name = args.out.as_os_str().to_owned();
        name.push(".report.json");
        PathBuf::from(name)
    };
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).context("serializing the preparation report")?,
    )
    .with_context(|| format!("writing {}", report_path.display()))?;
    println!(
        "wrote {} instances to {}; report in {}",
        data.len(),
        args.out.display(),
        report_path.display()
    );
    Ok(())
}
