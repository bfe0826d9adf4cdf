//! Config layering: defaults, then command-line flags, then a TOML file.
//!
//! Flags are applied onto the default configuration first; a `--config`
//! file then overrides any field it mentions, so a committed file stays
//! authoritative over ad-hoc shell history. Fields absent from the file
//! keep their flag (or default) values.

use std::path::Path;

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Recursively lays `over` on top of `base`: tables merge per key, any
/// other value replaces the one beneath it.
fn merge_value(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(base), toml::Value::Table(over)) => {
            for (key, value) in over {
                match base.get_mut(&key) {
                    Some(slot) => merge_value(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Returns `config` with the fields present in the TOML file at `path`
/// replaced by the file's values, plus the raw file table for callers that
/// need to know which keys the file actually set.
pub fn overlay_file<T>(config: &T, path: &Path) -> anyhow::Result<(T, toml::Value)>
where
    T: Serialize + DeserializeOwned,
{
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config file {}", path.display()))?;
    let file: toml::Table = text
        .parse()
        .with_context(|| format!("parsing {} as TOML", path.display()))?;
    let file = toml::Value::Table(file);
    let mut merged =
        toml::Value::try_from(config).context("serializing the flag-level configuration")?;
    merge_value(&mut merged, file.clone());
    let config = merged
        .try_into()
        .with_context(|| format!("applying {}", path.display()))?;
    Ok((config, file))
}

/// True when the TOML table sets `key` at its top level.
pub fn file_sets(file: &toml::Value, key: &str) -> bool {
    file.as_table().is_some_and(|t| t.contains_key(key))
}

/// Key paths in `file` that do not exist in `reference` (a serialized,
/// fully-populated instance of the target type). The target types ignore
/// unknown fields when deserializing, so without this check a typo in a
/// config file would silently fall back to the default value.
pub fn unknown_keys(file: &toml::Value, reference: &toml::Value) -> Vec<String> {
    fn walk(file: &toml::Value, reference: &toml::Value, prefix: &str, out: &mut Vec<String>) {
        let (Some(file), Some(reference)) = (file.as_table(), reference.as_table()) else {
            return;
        };
        for (key, value) in file {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match reference.get(key) {
                None => out.push(path),
                Some(expected) => walk(value, expected, &path, out),
            }
        }
    }
    let mut out = Vec::new();
    walk(file, reference, "", &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Sample {
        alpha: f64,
        label: String,
        nested: Nested,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Nested {
        count: usize,
        flag: bool,
    }

    impl Default for Sample {
        fn default() -> Self {
            Sample {
                alpha: 1.0,
                label: "base".into(),
                nested: Nested::default(),
            }
        }
    }

    impl Default for Nested {
        fn default() -> Self {
            Nested {
                count: 3,
                flag: false,
            }
        }
    }

    #[test]
    fn file_fields_win_and_absent_fields_keep_flag_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "alpha = 0.25\n[nested]\nflag = true\n").unwrap();
        let flags = Sample {
            alpha: 9.0,
            label: "from-flags".into(),
            nested: Nested {
                count: 7,
                flag: false,
            },
        };
        let (merged, file) = overlay_file(&flags, &path).unwrap();
        assert_eq!(merged.alpha, 0.25, "file overrides the flag");
        assert_eq!(merged.label, "from-flags", "untouched fields survive");
        assert_eq!(merged.nested.count, 7, "nested tables merge per key");
        assert!(merged.nested.flag);
        assert!(file_sets(&file, "alpha"));
        assert!(!file_sets(&file, "label"));
    }

    #[test]
    fn misspelled_keys_are_reported_against_a_reference() {
        let reference = toml::Value::try_from(Sample::default()).unwrap();
        let file: toml::Table = "alhpa = 0.2\n[nested]\ncount = 1\ncuont = 2\n".parse().unwrap();
        let unknown = unknown_keys(&toml::Value::Table(file), &reference);
        assert_eq!(unknown, vec!["alhpa".to_string(), "nested.cuont".to_string()]);
        let ok: toml::Table = "alpha = 0.2\n[nested]\ncount = 1\n".parse().unwrap();
        assert!(unknown_keys(&toml::Value::Table(ok), &reference).is_empty());
    }

    #[test]
    fn unknown_file_keys_are_rejected_when_the_target_denies_them() {
        #[derive(Debug, Default, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        struct Strict {
            alpha: f64,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "alhpa = 0.25\n").unwrap();
        assert!(overlay_file(&Strict::default(), &path).is_err());
    }
}
