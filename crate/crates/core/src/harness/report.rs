//! Per-method AUC/AUA tables and threshold calibration from a run directory.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::record::{latest_by_id, read_records, RunRecord};
use super::run::{ConfigLock, RECORDS_FILE};
use super::HarnessError;
use crate::baselines::Method;
use crate::metrics::{aua, auc, binarize_label, normalize_confidence, MetricsError, ScoredSample};
use crate::vcse::{calibrate_threshold, Calibration};

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CALIBRATION_FILE: &str = "calibration.json";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: Method,
    pub dataset: String,
    pub n: usize,
    /// `Err` carries the reason the cell is NA.
    pub auc: Result<f64, String>,
    pub aua: Result<f64, String>,
    pub binarize_threshold: f64,
    pub config_hash: String,
}

impl ReportRow {
    fn cell(v: &Result<f64, String>) -> String {
        match v {
            Ok(x) => format!("{x:.6}"),
            Err(reason) => format!("NA: {reason}"),
        }
    }

    pub fn auc_cell(&self) -> String {
        Self::cell(&self.auc)
    }

    pub fn aua_cell(&self) -> String {
        Self::cell(&self.aua)
    }
}

fn na_reason(e: MetricsError) -> String {
    match e {
        MetricsError::SingleClass => "single class".into(),
        MetricsError::Empty => "no samples".into(),
        MetricsError::NonFinite(id) => format!("non-finite score for {id}"),
    }
}

/// Labeled, scored samples of one method.
pub fn scored_samples(records: &[RunRecord], method: Method, threshold: f64) -> Vec<ScoredSample> {
    records
        .iter()
        .filter(|r| r.is_complete())
        .filter_map(|r| {
            let label = r.label.as_ref()?;
            let score = r.score(method)?;
            Some(ScoredSample {
                id: r.id.clone(),
                confidence: normalize_confidence(score),
                alpha_h: label.alpha_h,
                binary_halluc: binarize_label(label.alpha_h, threshold),
            })
        })
        .collect()
}

/// One row per method that scored at least one labeled record.
pub fn build_rows(records: &[RunRecord], dataset: &str, threshold: f64, config_hash: &str) -> Vec<ReportRow> {
    Method::ALL
        .into_iter()
        .filter_map(|method| {
            let samples = scored_samples(records, method, threshold);
            if samples.is_empty() {
                return None;
            }
            Some(ReportRow {
                method,
                dataset: dataset.to_string(),
                n: samples.len(),
                auc: auc(&samples).map_err(na_reason),
                aua: aua(&samples).map_err(na_reason),
                binarize_threshold: threshold,
                config_hash: config_hash.to_string(),
            })
        })
        .collect()
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "dataset", "n", "auc", "aua", "binarize_threshold", "config_hash"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.method.name().to_string(),
            r.dataset.clone(),
            r.n.to_string(),
            r.auc_cell(),
            r.aua_cell(),
            r.binarize_threshold.to_string(),
            r.config_hash.clone(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

pub fn render_summary(records: &[RunRecord], rows: &[ReportRow], dataset: &str, threshold: f64, config_hash: &str) -> String {
    let failed: Vec<&str> = records.iter().filter(|r| !r.is_complete()).map(|r| r.id.as_str()).collect();
    let labeled = records.iter().filter(|r| r.is_complete() && r.label.is_some()).count();
    let mut s = String::new();
    let _ = writeln!(s, "dataset: {dataset}");
    let _ = writeln!(s, "records: {} ({} labeled, {} failed)", records.len(), labeled, failed.len());
    let _ = writeln!(s, "binarize_threshold: {threshold}");
    let _ = writeln!(s, "config_hash: {config_hash}");
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<12} {:>6} {:>24} {:>24}", "method", "n", "AUC", "AUA");
    for r in rows {
        let _ = writeln!(s, "{:<12} {:>6} {:>24} {:>24}", r.method.name(), r.n, r.auc_cell(), r.aua_cell());
    }
    if !failed.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "failed records: {}", failed.join(", "));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub rows: Vec<ReportRow>,
    pub csv: String,
    pub summary: String,
}

/// Write `report.csv` and `summary.txt` for a run directory. The records
/// file is only read. `threshold` overrides the run's binarization
/// threshold.
pub fn report(dir: &Path, threshold: Option<f64>) -> Result<ReportOutput, HarnessError> {
    let lock = ConfigLock::read(dir)?;
    let records = latest_by_id(read_records(&dir.join(RECORDS_FILE))?);
    if records.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    let threshold = threshold.unwrap_or(lock.config.binarize_threshold);
    let rows = build_rows(&records, &lock.dataset, threshold, &lock.config_hash);
    let csv = render_csv(&rows);
    let summary = render_summary(&records, &rows, &lock.dataset, threshold, &lock.config_hash);
    for (name, body) in [(REPORT_FILE, &csv), (SUMMARY_FILE, &summary)] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    }
    Ok(ReportOutput { rows, csv, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: Method,
    pub n: usize,
    pub binarize_threshold: f64,
    #[serde(flatten)]
    pub calibration: Calibration,
}

/// Calibrate the flagging threshold on a run's UniVRSE scores and labels,
/// writing `calibration.json`.
pub fn calibrate(dir: &Path, threshold: Option<f64>) -> Result<CalibrationReport, HarnessError> {
    let lock = ConfigLock::read(dir)?;
    let records = latest_by_id(read_records(&dir.join(RECORDS_FILE))?);
    let threshold = threshold.unwrap_or(lock.config.binarize_threshold);
    let samples = scored_samples(&records, Method::UniVrse, threshold);
    if samples.is_empty() {
        return Err(HarnessError::EmptyRun);
    }
    // Back on the raw VSE axis: confidence is its negation.
    let scores: Vec<f64> = samples.iter().map(|s| -s.confidence).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.binary_halluc).collect();
    let calibration = calibrate_threshold(&scores, &labels).map_err(|e| HarnessError::Calibration(e.to_string()))?;
    let out = CalibrationReport {
        method: Method::UniVrse,
        n: samples.len(),
        binarize_threshold: threshold,
        calibration,
    };
    let path = dir.join(CALIBRATION_FILE);
    let body = serde_json::to_string_pretty(&out).expect("calibration serializes") + "\n";
    std::fs::write(&path, body).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(out)
}
