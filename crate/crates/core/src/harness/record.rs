//! One line of `records.jsonl`.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Task;
use super::HarnessError;
use crate::alfa::{AlfaLabel, AlfaOutcome};
use crate::baselines::{Method, UncertaintyScore};
use crate::longform::ClaimVerificationItem;
use crate::vcse::VseOutcome;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub task: Task,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default)]
    pub scores: Vec<UncertaintyScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<AlfaLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alfa: Option<AlfaOutcome>,
    /// VQA intermediates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vse: Option<Box<VseOutcome>>,
    /// VRG intermediates, one per claim.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub claims: Vec<ClaimVerificationItem>,
    /// Failures of individual steps that did not abort the record.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub step_errors: BTreeMap<String, String>,
    /// Set when the record could not be processed at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub template_hashes: BTreeMap<String, String>,
    pub backend_ids: BTreeMap<String, String>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunRecord {
    pub fn score(&self, method: Method) -> Option<&UncertaintyScore> {
        self.scores.iter().find(|s| s.method == method)
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }
}

/// Every record in file order. A torn final line (from an interrupted run)
/// is skipped with a warning.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(HarnessError::Io(format!("{}: {e}", path.display()))),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    let last = lines.len().saturating_sub(1);
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i == last => log::warn!("{}: ignoring incomplete last line: {e}", path.display()),
            Err(e) => return Err(HarnessError::Io(format!("{} line {}: {e}", path.display(), i + 1))),
        }
    }
    Ok(out)
}

/// The last record for each id, sorted by id.
pub fn latest_by_id(records: Vec<RunRecord>) -> Vec<RunRecord> {
    let mut map = BTreeMap::new();
    for r in records {
        map.insert(r.id.clone(), r);
    }
    map.into_values().collect()
}
