//! Dataset records on disk: one JSON object per line.
//!
//! The schema per line is `{id, query_tokens, images: [{image_id, features,
//! token_block?}], answer, answer_space, order_sensitivity,
//! difficulty_score?}`. Image placeholders inside `query_tokens` are the
//! literal string `<image>`. Fields this implementation does not know are
//! carried in `TaskInstance::extra` and written back verbatim, so foreign
//! annotations survive a round trip.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::types::{CoreError, TaskInstance};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: invalid record: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: CoreError,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes one instance as its single-line record form.
pub fn record_to_line(x: &TaskInstance) -> String {
    serde_json::to_string(x).expect("task instances are always serializable")
}

/// Parses one record line without validation.
pub fn record_from_line(line: &str) -> Result<TaskInstance, serde_json::Error> {
    serde_json::from_str(line)
}

/// Writes the dataset, one record per line, creating parent directories.
pub fn write_dataset(path: &Path, dataset: &[TaskInstance]) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(path, e))?;
        }
    }
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for x in dataset {
        out.write_all(record_to_line(x).as_bytes())
            .and_then(|()| out.write_all(b"\n"))
            .map_err(|e| io_err(path, e))?;
    }
    out.flush().map_err(|e| io_err(path, e))
}

/// Reads and validates a dataset. Blank lines are ignored; any malformed or
/// structurally invalid record is an error naming its line.
pub fn read_dataset(path: &Path) -> Result<Vec<TaskInstance>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let x = record_from_line(&line).map_err(|source| DatasetError::Malformed {
            line: lineno,
            source,
        })?;
        x.validate().map_err(|source| DatasetError::Invalid {
            line: lineno,
            source,
        })?;
        out.push(x);
    }
    Ok(out)
}

/// Stable content fingerprint over the serialized records, used to guard
/// checkpoint resumes against training on different data.
pub fn dataset_fingerprint(dataset: &[TaskInstance]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for x in dataset {
        hasher.update(record_to_line(x).as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{
        Answer, AnswerSpace, ImageDescriptor, OrderSensitivity, QueryToken,
    };

    fn sample_instance(id: &str) -> TaskInstance {
        TaskInstance {
            id: id.into(),
            query_tokens: vec![
                QueryToken::Text("countgt".into()),
                QueryToken::Image,
                QueryToken::Image,
            ],
            images: (0..2)
                .map(|j| ImageDescriptor {
                    image_id: format!("{id}-img{j}"),
                    features: vec![0.25 * (j as f64 + 1.0), -0.5],
                    token_block: vec![format!("v{j}"), "v3".into()],
                })
                .collect(),
            answer: Answer::short_text("1"),
            answer_space: AnswerSpace::ShortTexts(vec!["0".into(), "1".into(), "2".into()]),
            order_sensitivity: OrderSensitivity::OrderInvariant,
            difficulty_score: Some(0.3),
            extra: serde_json::Map::new(),
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let dataset = vec![sample_instance("a"), sample_instance("b")];
        write_dataset(&path, &dataset).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, dataset);
    }

    #[test]
    fn unknown_fields_survive_round_trip() {
        let mut line: serde_json::Value = serde_json::from_str(&record_to_line(&sample_instance("a"))).unwrap();
        line.as_object_mut()
            .unwrap()
            .insert("source_dataset".into(), serde_json::json!({"name": "zebra", "split": 3}));
        let parsed = record_from_line(&line.to_string()).unwrap();
        assert_eq!(
            parsed.extra.get("source_dataset"),
            Some(&serde_json::json!({"name": "zebra", "split": 3}))
        );
        let rewritten = record_to_line(&parsed);
        let reparsed: serde_json::Value = serde_json::from_str(&rewritten).unwrap();
        assert_eq!(
            reparsed.get("source_dataset"),
            Some(&serde_json::json!({"name": "zebra", "split": 3}))
        );
    }

    #[test]
    fn image_marker_round_trips_through_strings() {
        let x = sample_instance("a");
        let line = record_to_line(&x);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["query_tokens"][1], serde_json::json!("<image>"));
        assert_eq!(record_from_line(&line).unwrap(), x);
    }

    #[test]
    fn malformed_and_invalid_lines_are_reported_with_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let good = record_to_line(&sample_instance("a"));
        std::fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }

        let mut bad = sample_instance("b");
        bad.images.pop(); // marker count now disagrees
        std::fs::write(&path, format!("{good}\n\n{}\n", record_to_line(&bad))).unwrap();
        match read_dataset(&path) {
            Err(DatasetError::Invalid { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected invalid error, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_tracks_content_and_order() {
        let a = vec![sample_instance("a"), sample_instance("b")];
        let mut b = a.clone();
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&b));
        b.reverse();
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&b));
        b.reverse();
        b[0].difficulty_score = Some(0.4);
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&b));
    }
}
