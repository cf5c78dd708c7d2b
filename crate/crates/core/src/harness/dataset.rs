//! JSONL dataset ingestion.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("record {id:?}: image {path} not found")]
    MissingImage { id: String, path: PathBuf },
    #[error("dataset has no records")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vqa,
    Vrg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub task: Task,
    /// The question (VQA) or report instruction (VRG).
    pub question: String,
    pub reference: String,
}

/// Read and validate a dataset. Relative image paths are resolved against
/// the dataset file's directory.
pub fn ingest_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::ParseError { line: line_no, message };
        let mut rec: DatasetRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        for (field, value) in [("id", &rec.id), ("question", &rec.question), ("reference", &rec.reference)] {
            if value.trim().is_empty() {
                return Err(parse_err(format!("field {field} is empty")));
            }
        }
        if !seen.insert(rec.id.clone()) {
            return Err(DatasetError::DuplicateId(rec.id));
        }
        if rec.image_path.is_relative() {
            rec.image_path = base.join(&rec.image_path);
        }
        if !rec.image_path.is_file() {
            return Err(DatasetError::MissingImage {
                id: rec.id,
                path: rec.image_path,
            });
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(records)
}
