//! Dataset sidecar files.
//!
//! A dataset on disk is a `.jsonl` record file plus a `<file>.meta.json`
//! sidecar carrying the generator configuration (and with it the token
//! vocabulary). Downstream commands read the sidecar instead of asking the
//! user to restate vocabulary flags that must match the data exactly.

use std::path::{Path, PathBuf};

use anyhow::Context;
use permrl_core::env::{GeneratorConfig, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: GeneratorConfig,
}

/// `data.jsonl` → `data.jsonl.meta.json`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut name = data.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn write_meta(data_path: &Path, meta: &DatasetMeta) -> anyhow::Result<PathBuf> {
    let path = sidecar_path(data_path);
    let body = serde_json::to_string_pretty(meta).context("serializing dataset metadata")?;
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn read_meta(data_path: &Path) -> anyhow::Result<DatasetMeta> {
    let path = sidecar_path(data_path);
    let body = std::fs::read_to_string(&path).with_context(|| {
        format!(
            "reading {} (datasets travel with a .meta.json sidecar; generate \
             them with `permrl gen`)",
            path.display()
        )
    })?;
    serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
}

/// The vocabulary the sidecar describes.
pub fn vocab_of(meta: &DatasetMeta) -> anyhow::Result<Vocab> {
    Vocab::new(meta.generator.vocab).context("dataset metadata names an invalid vocabulary")
}
