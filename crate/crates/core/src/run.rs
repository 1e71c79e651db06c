//! Run records: the configuration, per-epoch metrics and final metrics of a
//! training run, saved as a JSON document plus a CSV metric table.
//!
//! The JSON carries two SHA-256 checksums. `metrics_csv` covers the bytes
//! of the CSV file; `record` covers the compact JSON serialization of the
//! record with the `record` checksum itself left out. Loading recomputes
//! both.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::TargetMode;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

const CSV_KEY: &str = "metrics_csv";
const RECORD_KEY: &str = "record";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// The held-out metric tracked per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    TestAccuracy,
    AveragePrecision,
}

impl MetricKind {
    pub fn for_mode(mode: TargetMode) -> Self {
        match mode {
            TargetMode::Multiclass => MetricKind::TestAccuracy,
            TargetMode::Multibox => MetricKind::AveragePrecision,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::TestAccuracy => "test_accuracy",
            MetricKind::AveragePrecision => "average_precision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Counted from 1 across both phases.
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub test_metric: f64,
    pub corrupted_fraction: f64,
    /// Milliseconds since the start of the run.
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub train_set: String,
    pub test_set: String,
    pub provenance: String,
    pub metric: MetricKind,
    pub epochs: Vec<EpochMetrics>,
    pub final_metrics: BTreeMap<String, f64>,
    pub wall_ms: u64,
    #[serde(default)]
    pub checksums: BTreeMap<String, String>,
}

impl RunRecord {
    /// Metric table: a header and one row per epoch.
    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e| Error::csv("<metrics>", e);
        w.write_record([
            "epoch",
            "train_loss",
            self.metric.name(),
            "corrupted_fraction",
            "wall_ms",
        ])
        .map_err(to_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.test_metric.to_string(),
                e.corrupted_fraction.to_string(),
                e.wall_ms.to_string(),
            ])
            .map_err(to_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::invalid(format!("csv buffer: {e}")))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record_digest(record: &RunRecord, path: &Path) -> Result<String> {
    let mut r = record.clone();
    r.checksums.remove(RECORD_KEY);
    let bytes = serde_json::to_vec(&r).map_err(|e| Error::json(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Path of the CSV table belonging to a record saved at `json_path`.
pub fn csv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

/// Writes `json_path` and its CSV sibling; returns the record as written,
/// checksums filled in.
pub fn save_run(record: &RunRecord, json_path: &Path) -> Result<RunRecord> {
    let csv_file = csv_path(json_path);
    let csv_bytes = record.metrics_csv()?;
    let mut r = record.clone();
    r.checksums.clear();
    r.checksums.insert(CSV_KEY.to_string(), sha256_hex(&csv_bytes));
    let digest = record_digest(&r, json_path)?;
    r.checksums.insert(RECORD_KEY.to_string(), digest);

    let json = serde_json::to_vec_pretty(&r).map_err(|e| Error::json(json_path, e))?;
    fs::write(&csv_file, csv_bytes).map_err(|e| Error::io(&csv_file, e))?;
    fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
    Ok(r)
}

/// Reads a record and verifies both checksums.
pub fn load_run(json_path: &Path) -> Result<RunRecord> {
    let bytes = fs::read(json_path).map_err(|e| Error::io(json_path, e))?;
    let record: RunRecord = serde_json::from_slice(&bytes).map_err(|e| Error::json(json_path, e))?;
    if record.schema_version != SCHEMA_VERSION {
        return Err(Error::invalid(format!(
            "{}: unsupported schema_version {}",
            json_path.display(),
            record.schema_version
        )));
    }
    let integrity = |path: &Path, message: &str| Error::Integrity {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    let stored = record
        .checksums
        .get(RECORD_KEY)
        .ok_or_else(|| integrity(json_path, "record checksum missing"))?;
    if *stored != record_digest(&record, json_path)? {
        return Err(integrity(json_path, "record checksum mismatch"));
    }

    let csv_file = csv_path(json_path);
    let csv_bytes = fs::read(&csv_file).map_err(|e| Error::io(&csv_file, e))?;
    let stored = record
        .checksums
        .get(CSV_KEY)
        .ok_or_else(|| integrity(json_path, "metrics checksum missing"))?;
    if *stored != sha256_hex(&csv_bytes) {
        return Err(integrity(&csv_file, "metrics checksum mismatch"));
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{LossKind, LossSpec};
    use crate::noise::NoiseSpec;

    fn record() -> RunRecord {
        let config = TrainConfig {
            loss: LossSpec::reported(LossKind::BootstrapRecon),
            noise: Some(NoiseSpec::permutation(vec![1, 0], 0.3, 9)),
            ..TrainConfig::default()
        };
        RunRecord {
            schema_version: SCHEMA_VERSION,
            config,
            train_set: "a".into(),
            test_set: "b".into(),
            provenance: "p".into(),
            metric: MetricKind::TestAccuracy,
            epochs: (1..=3)
                .map(|e| EpochMetrics {
                    epoch: e,
                    phase: if e < 3 { Phase::Pretrain } else { Phase::Finetune },
                    train_loss: 1.0 / e as f64,
                    test_metric: 0.1 * e as f64,
                    corrupted_fraction: 0.3,
                    wall_ms: 10 * e as u64,
                })
                .collect(),
            final_metrics: [("test_accuracy".to_string(), 0.3)].into_iter().collect(),
            wall_ms: 30,
            checksums: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let saved = save_run(&record(), &path).unwrap();
        let loaded = load_run(&path).unwrap();
        assert_eq!(loaded, saved);
        let RunRecord { checksums, .. } = loaded.clone();
        assert_eq!(checksums.len(), 2);
        assert_eq!(
            RunRecord {
                checksums: BTreeMap::new(),
                ..loaded
            },
            record()
        );
    }

    #[test]
    fn csv_has_header_plus_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_run(&record(), &path).unwrap();
        let text = fs::read_to_string(csv_path(&path)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "epoch,train_loss,test_accuracy,corrupted_fraction,wall_ms"
        );
        assert_eq!(lines[1], "1,1,0.1,0.3,10");
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        save_run(&record(), &path).unwrap();

        let csv_file = csv_path(&path);
        let original = fs::read_to_string(&csv_file).unwrap();
        fs::write(&csv_file, original.replace("0.1,", "0.9,")).unwrap();
        assert!(matches!(load_run(&path), Err(Error::Integrity { .. })));
        fs::write(&csv_file, &original).unwrap();

        let json = fs::read_to_string(&path).unwrap();
        fs::write(&path, json.replacen("\"wall_ms\": 30", "\"wall_ms\": 31", 1)).unwrap();
        assert!(matches!(load_run(&path), Err(Error::Integrity { .. })));
    }

    #[test]
    fn missing_file_reports_path() {
        let e = load_run(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/run.json"));
    }
}
