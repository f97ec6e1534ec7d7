//! Line-delimited JSON manifests.
//!
//! Every row is a JSON object carrying `schema_version`. Rows are written
//! sorted by [`ManifestRow::sort_key`], so any permutation of the same rows
//! produces the same bytes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "dishforge/1";
const SCHEMA_FAMILY: &str = "dishforge/";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema violation at row {row}: {message}")]
    Schema { row: usize, message: String },
}

impl ManifestError {
    /// 1-based line of a parse error, if this is one.
    pub fn parse_line(&self) -> Option<usize> {
        match self {
            ManifestError::Parse { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// A row type that can live in a manifest.
pub trait ManifestRow: Serialize + DeserializeOwned {
    fn sort_key(&self) -> String;

    /// Row-level invariants checked on both write and read.
    fn validate(&self) -> Result<(), String> {
        Ok(())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes rows to manifest bytes (sorted, one object per line).
pub fn encode_manifest<T: ManifestRow>(rows: &[T]) -> Result<Vec<u8>, ManifestError> {
    let mut lines = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        row.validate()
            .map_err(|message| ManifestError::Schema { row: i, message })?;
        let mut value = serde_json::to_value(row).map_err(|e| ManifestError::Schema {
            row: i,
            message: e.to_string(),
        })?;
        let Value::Object(map) = &mut value else {
            return Err(ManifestError::Schema {
                row: i,
                message: "row does not serialize to an object".into(),
            });
        };
        map.insert("schema_version".into(), Value::String(SCHEMA_VERSION.into()));
        let line = serde_json::to_string(&value).expect("json value serializes");
        lines.push((row.sort_key(), line));
    }
    // Full-line tiebreak keeps equal keys permutation-independent.
    lines.sort();
    let mut out = Vec::new();
    for (_, line) in lines {
        out.extend_from_slice(line.as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}

/// Writes `rows` to `path`, replacing it atomically. Returns the row count.
pub fn write_manifest<T: ManifestRow>(path: &Path, rows: &[T]) -> Result<usize, ManifestError> {
    let bytes = encode_manifest(rows)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(rows.len())
}

/// Parses manifest bytes in file order.
pub fn decode_manifest<T: ManifestRow>(bytes: &[u8]) -> Result<Vec<T>, ManifestError> {
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(bytes).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ManifestError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_line::<T>(&line, line_no)?);
    }
    Ok(rows)
}

fn parse_line<T: ManifestRow>(line: &str, line_no: usize) -> Result<T, ManifestError> {
    let parse = |message: String| ManifestError::Parse {
        line: line_no,
        message,
    };
    let mut value: Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
    let Value::Object(map) = &mut value else {
        return Err(parse("row is not a JSON object".into()));
    };
    match map.remove("schema_version") {
        Some(Value::String(v)) if v.starts_with(SCHEMA_FAMILY) => {}
        Some(other) => return Err(parse(format!("unsupported schema_version {other}"))),
        None => return Err(parse("missing schema_version".into())),
    }
    let row: T = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
    row.validate().map_err(|message| ManifestError::Schema {
        row: line_no,
        message,
    })?;
    Ok(row)
}

pub fn read_manifest<T: ManifestRow>(path: &Path) -> Result<Vec<T>, ManifestError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_manifest(&bytes)
}
