//! Line-delimited transcript store: one JSON object per line, append-only.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::Transcript;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: schema version {found} is newer than supported {supported}")]
    SchemaVersionMismatch {
        path: PathBuf,
        line: usize,
        found: u32,
        supported: u32,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends `transcript` to the store at `path`.
pub fn record_transcript(transcript: &Transcript, path: &Path) -> Result<(), StoreError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(path))?;
    }
    let mut line = serde_json::to_string(transcript).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    line.push('\n');
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))
}

/// Writes a whole store at once through a temporary file and rename.
pub fn write_store(transcripts: &[Transcript], path: &Path) -> Result<(), StoreError> {
    let mut buf = String::new();
    for t in transcripts {
        buf.push_str(&serde_json::to_string(t).expect("transcripts serialize"));
        buf.push('\n');
    }
    crate::report::write_atomic(path, buf.as_bytes()).map_err(io_err(path))
}

fn parse_line(path: &Path, line_no: usize, line: &str) -> Result<Transcript, StoreError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })?;
    let found = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| StoreError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: "missing schema_version".into(),
        })? as u32;
    if found > SCHEMA_VERSION {
        return Err(StoreError::SchemaVersionMismatch {
            path: path.to_path_buf(),
            line: line_no,
            found,
            supported: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

/// Reads every transcript in the store, in file order.
pub fn load_all(path: &Path) -> Result<Vec<Transcript>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(path, i + 1, &line)?);
    }
    Ok(out)
}

pub fn load_transcript(path: &Path, trial_id: &str) -> Result<Transcript, StoreError> {
    load_all(path)?
        .into_iter()
        .find(|t| t.trial_id == trial_id)
        .ok_or_else(|| StoreError::Io {
            path: path.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, format!("trial {trial_id:?} not in store")),
        })
}
