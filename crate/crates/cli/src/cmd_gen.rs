//! `permrl gen`: synthesize a dataset of multi-image questions.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use permrl_core::dataset::write_dataset;
use permrl_core::env::{
    generate_dataset, template_kind_of, GeneratorConfig, TaskTemplate, WeightedTemplate,
};

use crate::layering::{overlay_file, unknown_keys};
use crate::meta::{write_meta, DatasetMeta};

/// Task family for single-family generation.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TemplateArg {
    /// "Which option is most similar to the reference image?"
    Similarity,
    /// "Which image scores highest on the first feature?"
    Extremum,
    /// "How many images have a positive first feature?"
    Counting,
}

impl TemplateArg {
    fn template(self, images: Option<usize>) -> TaskTemplate {
        match self {
            TemplateArg::Similarity => TaskTemplate::reference_comparison(images.unwrap_or(3)),
            TemplateArg::Extremum => TaskTemplate::attribute_extremum(images.unwrap_or(2)),
            TemplateArg::Counting => TaskTemplate::counting(images.unwrap_or(3)),
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output record file, one JSON object per line
    #[arg(long)]
    pub out: PathBuf,
    /// TOML generator configuration; fields set there override flags
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of instances to generate
    #[arg(long)]
    pub size: Option<usize>,
    /// Minimum ground-truth separation between the answer and the runner-up
    #[arg(long)]
    pub margin: Option<f64>,
    /// Rejection-sampling budget per instance
    #[arg(long)]
    pub max_retries: Option<usize>,
    /// Generate only this task family instead of the default mixture
    #[arg(long, value_enum)]
    pub template: Option<TemplateArg>,
    /// Images per task; only meaningful together with --template
    #[arg(long, requires = "template")]
    pub images: Option<usize>,
    /// Probability that the correct option is listed first in similarity
    /// tasks (1.0 plants a pure positional shortcut)
    #[arg(long)]
    pub correct_first_bias: Option<f64>,
    /// Number of single-choice answer labels in the vocabulary
    #[arg(long)]
    pub choice_labels: Option<usize>,
    /// Largest count the counting family may ask for
    #[arg(long)]
    pub max_count: Option<usize>,
    /// Filler words available for question text
    #[arg(long)]
    pub filler_words: Option<usize>,
    /// Feature dimensions per image
    #[arg(long)]
    pub feature_dim: Option<usize>,
    /// Quantization buckets per feature dimension
    #[arg(long)]
    pub feature_buckets: Option<usize>,
}

fn config_from(args: &GenArgs) -> anyhow::Result<GeneratorConfig> {
    let mut cfg = GeneratorConfig::default();
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.size {
        cfg.dataset_size = v;
    }
    if let Some(v) = args.margin {
        cfg.margin = v;
    }
    if let Some(v) = args.max_retries {
        cfg.max_retries = v;
    }
    if let Some(t) = args.template {
        cfg.templates = vec![WeightedTemplate {
            template: t.template(args.images),
            weight: 1.0,
        }];
    }
    if let Some(v) = args.correct_first_bias {
        cfg.correct_first_bias = v;
    }
    if let Some(v) = args.choice_labels {
        cfg.vocab.choice_labels = v;
    }
    if let Some(v) = args.max_count {
        cfg.vocab.max_count = v;
    }
    if let Some(v) = args.filler_words {
        cfg.vocab.filler_words = v;
    }
    if let Some(v) = args.feature_dim {
        cfg.vocab.feature_dim = v;
    }
    if let Some(v) = args.feature_buckets {
        cfg.vocab.feature_buckets = v;
    }
    if let Some(path) = &args.config {
        let (merged, file) = overlay_file(&cfg, path)?;
        let reference = toml::Value::try_from(GeneratorConfig::default())
            .context("serializing the reference generator configuration")?;
        let unknown = unknown_keys(&file, &reference);
        if !unknown.is_empty() {
            bail!("{} sets unknown keys: {}", path.display(), unknown.join(", "));
        }
        cfg = merged;
    }
    Ok(cfg)
}

pub fn run(args: GenArgs) -> anyhow::Result<()> {
    let cfg = config_from(&args)?;
    let data = generate_dataset(&cfg).context("generating the dataset")?;
    let mut by_family: BTreeMap<&'static str, usize> = BTreeMap::new();
    for x in &data {
        let kind = template_kind_of(x).context("classifying a generated instance")?;
        *by_family.entry(kind.keyword()).or_insert(0) += 1;
    }
    write_dataset(&args.out, &data).context("writing the dataset")?;
    let meta_path = write_meta(&args.out, &DatasetMeta { generator: cfg })?;
    let families = by_family
        .iter()
        .map(|(k, n)| format!("{k} {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!(
        "wrote {} instances to {} ({families}); metadata in {}",
        data.len(),
        args.out.display(),
        meta_path.display()
    );
    Ok(())
}
