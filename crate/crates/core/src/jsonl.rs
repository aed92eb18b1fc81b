//! JSON-lines persistence shared by every artifact schema.
//!
//! Every record is written with a leading `schema_version` field.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Current version of every JSONL/JSON schema emitted by this crate.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: record {index} (line {line}): {source}")]
    Parse {
        path: PathBuf,
        index: usize,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: record {index} has schema_version {found}, expected {SCHEMA_VERSION}")]
    Version { path: PathBuf, index: usize, found: u32 },
}

#[derive(Serialize)]
struct VersionedRef<'a, T> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a T,
}

#[derive(Deserialize)]
struct Versioned<T> {
    schema_version: u32,
    #[serde(flatten)]
    record: T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> JsonlError + '_ {
    move |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes one record as a single JSON line (no trailing newline).
pub fn to_line<T: Serialize>(record: &T) -> String {
    serde_json::to_string(&VersionedRef {
        schema_version: SCHEMA_VERSION,
        record,
    })
    .expect("records serialize to JSON")
}

/// Writes `records` to `path`, one per line, replacing the file.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for record in records {
        writeln!(out, "{}", to_line(record)).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Appends `records` to `path`, creating it when absent.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for record in records {
        writeln!(out, "{}", to_line(record)).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

/// Reads every non-blank line of `path` as a `T`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let index = records.len();
        let parsed: Versioned<T> = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            index,
            line: lineno + 1,
            source,
        })?;
        if parsed.schema_version != SCHEMA_VERSION {
            return Err(JsonlError::Version {
                path: path.to_path_buf(),
                index,
                found: parsed.schema_version,
            });
        }
        records.push(parsed.record);
    }
    Ok(records)
}

/// Writes a single versioned JSON document (pretty-printed).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut text = serde_json::to_string_pretty(&VersionedRef {
        schema_version: SCHEMA_VERSION,
        record: value,
    })
    .expect("documents serialize to JSON");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Reads a versioned JSON document written by [`write_json`].
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, JsonlError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parsed: Versioned<T> = serde_json::from_str(&text).map_err(|source| JsonlError::Parse {
        path: path.to_path_buf(),
        index: 0,
        line: source.line(),
        source,
    })?;
    if parsed.schema_version != SCHEMA_VERSION {
        return Err(JsonlError::Version {
            path: path.to_path_buf(),
            index: 0,
            found: parsed.schema_version,
        });
    }
    Ok(parsed.record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Rec {
        id: String,
        value: f64,
    }

    #[test]
    fn round_trip_and_version_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        let recs = vec![
            Rec {
                id: "a".into(),
                value: 0.1,
            },
            Rec {
                id: "b".into(),
                value: -3.5e-9,
            },
        ];
        write_jsonl(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.starts_with("{\"schema_version\":1,")));
        let back: Vec<Rec> = read_jsonl(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn parse_error_names_record_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"schema_version\":1,\"id\":\"a\",\"value\":1}\n\n{\"schema_version\":1,\"id\":3}\n",
        )
        .unwrap();
        match read_jsonl::<Rec>(&path) {
            Err(JsonlError::Parse { index, line, .. }) => {
                assert_eq!(index, 1);
                assert_eq!(line, 3);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_unknown_schema_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        std::fs::write(&path, "{\"schema_version\":9,\"id\":\"a\",\"value\":1}\n").unwrap();
        assert!(matches!(
            read_jsonl::<Rec>(&path),
            Err(JsonlError::Version { found: 9, .. })
        ));
    }
}
