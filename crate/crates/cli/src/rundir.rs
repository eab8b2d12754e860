//! Run-directory layout: raw response records and the predictions CSV.
//!
//! Layout of a model run directory:
//! ```text
//! <out>/
//!   manifest.json      written first
//!   raw/<id>.json      one record per report, written as each finishes
//!   predictions.csv    written last; its presence marks a complete run
//! ```
//!
//! Records hold the *raw* parse result (before hierarchy propagation), so the
//! CSV can always be recomputed deterministically from `raw/` — resuming a run
//! replays cached records byte-for-byte into the same CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use radlabel_core::parser::ParseDiagnostics;
use radlabel_core::schema::{FindingLabel, FindingSchema, LabelVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::errors::{CliError, CliResult};

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const RAW_DIR: &str = "raw";

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Everything recorded about one report's labeling attempt. `labels` is the
/// parser output after normalization only; collapse and hierarchy propagation
/// are applied when the CSV is built.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub report_id: String,
    pub raw_text: String,
    pub finish_reason: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub labels: LabelVector,
    pub diagnostics: ParseDiagnostics,
    pub failed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

/// Filename for a record: the report id verbatim when it is filesystem-safe,
/// otherwise a digest of it.
pub fn record_filename(report_id: &str) -> String {
    let safe = !report_id.is_empty()
        && report_id.len() <= 100
        && report_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'));
    if safe {
        format!("{report_id}.json")
    } else {
        let digest = hex::encode(Sha256::digest(report_id.as_bytes()));
        format!("sha256-{}.json", &digest[..16])
    }
}

/// Writes via a temp file + rename so an interrupted run never leaves a
/// half-written record for resume to trip over.
pub fn write_record(run_dir: &Path, record: &PredictionRecord) -> CliResult<()> {
    let raw_dir = run_dir.join(RAW_DIR);
    std::fs::create_dir_all(&raw_dir)
        .map_err(|e| CliError::validation(format!("cannot create {}: {e}", raw_dir.display())))?;
    let final_path = raw_dir.join(record_filename(&record.report_id));
    let tmp_path = final_path.with_extension("json.tmp");
    let mut text = serde_json::to_string_pretty(record)
        .map_err(|e| CliError::validation(format!("cannot serialize record: {e}")))?;
    text.push('\n');
    std::fs::write(&tmp_path, text)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", tmp_path.display())))?;
    std::fs::rename(&tmp_path, &final_path).map_err(|e| {
        CliError::validation(format!("cannot finalize {}: {e}", final_path.display()))
    })?;
    Ok(())
}

/// Loads every complete record under `raw/`, keyed by the report id stored
/// *inside* each record (filenames may be digests).
pub fn read_records(run_dir: &Path) -> CliResult<BTreeMap<String, PredictionRecord>> {
    let raw_dir = run_dir.join(RAW_DIR);
    let mut records = BTreeMap::new();
    if !raw_dir.is_dir() {
        return Ok(records);
    }
    let entries = std::fs::read_dir(&raw_dir)
        .map_err(|e| CliError::validation(format!("cannot list {}: {e}", raw_dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::validation(format!("cannot list {}: {e}", raw_dir.display())))?
            .path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        let record: PredictionRecord = serde_json::from_str(&text).map_err(|e| {
            CliError::validation(format!("malformed record {}: {e}", path.display()))
        })?;
        if let Some(previous) = records.insert(record.report_id.clone(), record) {
            return Err(CliError::validation(format!(
                "two records claim report id {:?}",
                previous.report_id
            )));
        }
    }
    Ok(records)
}

/// Writes the predictions table: `report_id` plus one column per finding in
/// schema order, rows sorted by report id so output is deterministic.
pub fn write_predictions_csv(
    path: &Path,
    schema: &FindingSchema,
    predictions: &BTreeMap<String, LabelVector>,
) -> CliResult<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec!["report_id".to_string()];
    header.extend(schema.findings.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))?;
    for (id, labels) in predictions {
        let mut row = vec![id.clone()];
        for finding in &schema.findings {
            let label = labels.get(finding).ok_or_else(|| {
                CliError::validation(format!("prediction for {id:?} is missing {finding:?}"))
            })?;
            row.push(label.token().to_string());
        }
        writer
            .write_record(&row)
            .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// A predictions table as read back: the finding columns in file order and
/// each row's raw tokens, still unvalidated strings.
#[derive(Debug, Clone)]
pub struct PredictionsTable {
    pub findings: Vec<String>,
    pub rows: BTreeMap<String, Vec<String>>,
}

impl PredictionsTable {
    pub fn read(path: &Path) -> CliResult<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?
            .clone();
        let mut columns = headers.iter();
        if columns.next() != Some("report_id") {
            return Err(CliError::validation(format!(
                "{}: first column must be report_id",
                path.display()
            )));
        }
        let findings: Vec<String> = columns.map(str::to_string).collect();
        if findings.is_empty() {
            return Err(CliError::validation(format!(
                "{}: no finding columns",
                path.display()
            )));
        }
        let mut rows = BTreeMap::new();
        for result in reader.records() {
            let record = result.map_err(|e| {
                CliError::validation(format!("cannot read {}: {e}", path.display()))
            })?;
            let mut fields = record.iter();
            let id = fields.next().unwrap_or("").to_string();
            if id.is_empty() {
                return Err(CliError::validation(format!(
                    "{}: row with empty report_id",
                    path.display()
                )));
            }
            let tokens: Vec<String> = fields.map(str::to_string).collect();
            if tokens.len() != findings.len() {
                return Err(CliError::validation(format!(
                    "{}: row {id:?} has {} values for {} findings",
                    path.display(),
                    tokens.len(),
                    findings.len()
                )));
            }
            if rows.insert(id.clone(), tokens).is_some() {
                return Err(CliError::validation(format!(
                    "{}: duplicate report id {id:?}",
                    path.display()
                )));
            }
        }
        Ok(Self { findings, rows })
    }

    /// Converts one row into a label vector, rejecting tokens outside the
    /// yes/maybe/no/no_information vocabulary.
    pub fn row_vector(&self, id: &str, source: &Path) -> CliResult<LabelVector> {
        let tokens = self
            .rows
            .get(id)
            .ok_or_else(|| CliError::validation(format!("{}: no row for {id:?}", source.display())))?;
        let mut pairs = Vec::with_capacity(self.findings.len());
        for (finding, token) in self.findings.iter().zip(tokens) {
            let label = FindingLabel::from_token(token).ok_or_else(|| {
                CliError::validation(format!(
                    "{}: report {id:?}, finding {finding:?}: unknown label token {token:?}",
                    source.display()
                ))
            })?;
            pairs.push((finding.clone(), label));
        }
        Ok(LabelVector::from_pairs(pairs))
    }
}

/// Directory is usable as a fresh output target: absent, or present but empty.
pub fn ensure_fresh_dir(path: &Path) -> CliResult<()> {
    if path.exists() {
        if !path.is_dir() {
            return Err(CliError::usage(format!(
                "{} exists and is not a directory",
                path.display()
            )));
        }
        let mut entries = std::fs::read_dir(path)
            .map_err(|e| CliError::usage(format!("cannot list {}: {e}", path.display())))?;
        if entries.next().is_some() {
            return Err(CliError::usage(format!(
                "{} is not empty (pass --resume to continue an interrupted run)",
                path.display()
            )));
        }
    } else {
        std::fs::create_dir_all(path)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Default run id: the final component of the output directory.
pub fn run_id_from_dir(out: &Path, explicit: Option<String>) -> CliResult<String> {
    if let Some(id) = explicit {
        if id.trim().is_empty() {
            return Err(CliError::usage("--run-id must not be empty"));
        }
        return Ok(id);
    }
    out.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .filter(|n| !n.is_empty())
        .ok_or_else(|| {
            CliError::usage(format!(
                "cannot derive a run id from {}; pass --run-id",
                out.display()
            ))
        })
}

pub fn predictions_path(run_dir: &Path) -> PathBuf {
    run_dir.join(PREDICTIONS_FILE)
}
