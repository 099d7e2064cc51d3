//! Line-delimited JSON readers and writers shared by every file schema.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },
}

impl JsonlError {
    pub fn record(path: &Path, line: usize, message: impl Into<String>) -> Self {
        JsonlError::Record {
            path: path.display().to_string(),
            line,
            message: message.into(),
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        JsonlError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Read every record of a line-delimited JSON file. Blank lines are
/// rejected rather than skipped so that truncated files surface early.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let record: T = serde_json::from_str(&line)
            .map_err(|e| JsonlError::record(path, line_no, e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

/// Like [`read_jsonl`] but hands each record to a validating closure along
/// with its 1-based line number, so loaders can report the first violation.
pub fn read_jsonl_with<T, U>(
    path: &Path,
    mut convert: impl FnMut(T, usize) -> Result<U, String>,
) -> Result<Vec<U>, JsonlError>
where
    T: DeserializeOwned,
{
    let mut out = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let raw: T = serde_json::from_str(&line)
            .map_err(|e| JsonlError::record(path, line_no, e.to_string()))?;
        out.push(convert(raw, line_no).map_err(|m| JsonlError::record(path, line_no, m))?);
    }
    Ok(out)
}

fn open_lines(path: &Path) -> Result<Vec<(usize, String)>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| JsonlError::io(path, e))?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            return Err(JsonlError::record(path, line_no, "blank line"));
        }
        lines.push((line_no, line));
    }
    Ok(lines)
}

/// Write records as one JSON object per line. Serialization is
/// deterministic (struct field order), which the reproducibility tests
/// rely on.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    let file = File::create(path).map_err(|e| JsonlError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| JsonlError::record(path, 0, e.to_string()))?;
        writeln!(writer, "{line}").map_err(|e| JsonlError::io(path, e))?;
    }
    writer.flush().map_err(|e| JsonlError::io(path, e))
}

/// Render records to the jsonl byte representation without touching disk.
pub fn to_jsonl_string<T: Serialize>(records: &[T]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}
