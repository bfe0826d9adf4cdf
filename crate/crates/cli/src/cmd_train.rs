//! `permrl train`: run the training loop against a prepared dataset.
//!
//! Configuration is layered: built-in defaults, then any flags below, then
//! a `--config` TOML file, whose fields win. The run directory receives a
//! `metrics.jsonl` stream and a `checkpoint.json` that `--resume` continues
//! from bit-for-bit.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use permrl_core::dataset::read_dataset;
use permrl_core::trainer::{RunOptions, Trainer};
use permrl_core::types::{CoinScope, LossMode, TrainerConfig};

use crate::layering::{file_sets, overlay_file, unknown_keys};
use crate::meta::{read_meta, vocab_of};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LossModeArg {
    /// One baseline over all of a sample's groups
    Merged,
    /// Each group normalized against its own mean and spread
    PerGroup,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CoinScopeArg {
    /// Independent permutation coin per sample
    PerSample,
    /// One coin per step for the whole batch
    PerBatch,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training record file, read together with its .meta.json sidecar
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for metrics and checkpoints
    #[arg(long, env = "PERMRL_OUT_DIR")]
    pub out: PathBuf,
    /// TOML trainer configuration; fields set there override flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the checkpoint already in the run directory
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many steps; a later --resume picks up exactly there
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total optimization steps
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Passes over the dataset, as an alternative to --t-max
    #[arg(long, conflicts_with = "t_max")]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Rollouts sampled per group
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Additional permuted groups per sample; 0 trains without augmentation
    #[arg(long)]
    pub permuted_groups: Option<usize>,
    /// Initial permutation probability; decays linearly to 0
    #[arg(long)]
    pub alpha0: Option<f64>,
    /// KL penalty coefficient against the frozen reference policy
    #[arg(long)]
    pub beta: Option<f64>,
    /// Ratio clipping half-width
    #[arg(long)]
    pub clip_eps: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Zero-variance guard on the reward spread
    #[arg(long)]
    pub epsilon_std: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossModeArg>,
    #[arg(long, value_enum)]
    pub coin_scope: Option<CoinScopeArg>,
    #[arg(long)]
    pub max_response_len: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Geometric position weight in the pooled input context; 1.0 makes the
    /// policy order-blind by construction
    #[arg(long)]
    pub position_decay: Option<f64>,
    /// Steps between checkpoint rewrites; 0 writes only the final one
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Steps between in-loop order-gap evaluations; 0 disables them
    #[arg(long)]
    pub gap_eval_every: Option<usize>,
    /// Weight of the answer-accuracy reward component
    #[arg(long)]
    pub w_accuracy: Option<f64>,
    /// Weight of the response-format reward component
    #[arg(long)]
    pub w_format: Option<f64>,
    /// Only credit accuracy when the format check passes
    #[arg(long)]
    pub gate_accuracy_on_format: Option<bool>,
}

/// A fully-populated configuration for unknown-key detection: serialized
/// `Option` fields disappear from TOML tables, so the reference must have
/// every optional field set.
pub fn trainer_reference() -> anyhow::Result<toml::Value> {
    toml::Value::try_from(TrainerConfig {
        t_max: Some(1),
        epochs: Some(1),
        ..TrainerConfig::default()
    })
    .context("serializing the reference trainer configuration")
}

pub fn build_config(args: &TrainArgs) -> anyhow::Result<TrainerConfig> {
    let mut cfg = TrainerConfig::default();
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.t_max {
        cfg.t_max = Some(v);
    }
    if let Some(v) = args.epochs {
        cfg.epochs = Some(v);
        cfg.t_max = None;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.rollouts {
        cfg.rollouts_per_group = v;
    }
    if let Some(v) = args.permuted_groups {
        cfg.permuted_groups = v;
    }
    if let Some(v) = args.alpha0 {
        cfg.alpha0 = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.clip_eps {
        cfg.clip_eps = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.epsilon_std {
        cfg.epsilon_std = v;
    }
    if let Some(v) = args.loss_mode {
        cfg.loss_mode = match v {
            LossModeArg::Merged => LossMode::Merged,
            LossModeArg::PerGroup => LossMode::PerGroup,
        };
    }
    if let Some(v) = args.coin_scope {
        cfg.coin_scope = match v {
            CoinScopeArg::PerSample => CoinScope::PerSample,
            CoinScopeArg::PerBatch => CoinScope::PerBatch,
        };
    }
    if let Some(v) = args.max_response_len {
        cfg.max_response_len = v;
    }
    if let Some(v) = args.embed_dim {
        cfg.embed_dim = v;
    }
    if let Some(v) = args.hidden_dim {
        cfg.hidden_dim = v;
    }
    if let Some(v) = args.init_scale {
        cfg.init_scale = v;
    }
    if let Some(v) = args.position_decay {
        cfg.position_decay = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.gap_eval_every {
        cfg.gap_eval_every = v;
    }
    if let Some(v) = args.w_accuracy {
        cfg.reward.w_accuracy = v;
    }
    if let Some(v) = args.w_format {
        cfg.reward.w_format = v;
    }
    if let Some(v) = args.gate_accuracy_on_format {
        cfg.reward.gate_accuracy_on_format = v;
    }
    if let Some(path) = &args.config {
        let (merged, file) = overlay_file(&cfg, path)?;
        let unknown = unknown_keys(&file, &trainer_reference()?);
        if !unknown.is_empty() {
            bail!("{} sets unknown keys: {}", path.display(), unknown.join(", "));
        }
        cfg = merged;
        // A file asking for an epoch schedule only implies dropping the
        // default step count, exactly as the --epochs flag does.
        if file_sets(&file, "epochs") && !file_sets(&file, "t_max") {
            cfg.t_max = None;
        }
    }
    Ok(cfg)
}

pub fn run(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = build_config(&args)?;
    let meta = read_meta(&args.data)?;
    let vocab = vocab_of(&meta)?;
    let data = read_dataset(&args.data).context("reading the training dataset")?;
    let mut trainer = if args.resume {
        Trainer::resume(cfg, vocab, data, &args.out).context("resuming from the checkpoint")?
    } else {
        Trainer::new(cfg, vocab, data).context("building the trainer")?
    };
    let summary = trainer
        .run(&RunOptions {
            out_dir: args.out.clone(),
            stop_after: args.stop_after,
        })
        .context("training failed")?;
    println!(
        "completed {} steps ({} of {} total){}{}",
        summary.steps_completed,
        summary.step,
        summary.total_steps,
        summary
            .final_mean_reward
            .map(|r| format!("; final mean reward {r:.4}"))
            .unwrap_or_default(),
        summary
            .final_gap
            .map(|g| format!("; last order gap {g:+.4}"))
            .unwrap_or_default(),
    );
    println!(
        "metrics: {}\ncheckpoint: {}",
        summary.metrics_path.display(),
        summary.checkpoint_path.display()
    );
    Ok(())
}
