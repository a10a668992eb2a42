//! Per-cell result rows and their CSV forms. Values are written at full
//! precision so reports can be rebuilt from these files alone.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dimension, EnrollmentSize};
use crate::error::{Error, Result};
use crate::mapper::{MappingTable, Method};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: Method,
    pub seed: usize,
    pub fold: usize,
    pub dimension: Dimension,
    pub ccc_ind: f64,
    pub ccc_agg: f64,
    pub n_annotators_scored: usize,
}

/// Mapped-method result for one enrollment size in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub seed: usize,
    pub fold: usize,
    pub enrollment: EnrollmentSize,
    pub dimension: Dimension,
    pub ccc_ind: f64,
    pub ccc_agg: f64,
    pub n_annotators_scored: usize,
    /// Share of targets mapped to their planted source (simulated data only).
    pub planted_recovery: Option<f64>,
}

/// One mapped (target, dimension) pair of the full-enrollment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed: usize,
    pub fold: usize,
    pub target_id: String,
    pub dimension: Dimension,
    pub source_id: String,
    pub enrollment_ccc: f64,
    /// The selected head's CCC on source validation data.
    pub source_train_ccc: Option<f64>,
    /// The target's test CCC under the mapping; unset with < 2 test samples.
    pub test_ccc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceHeadRecord {
    pub seed: usize,
    pub source_id: String,
    pub dimension: Dimension,
    pub ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingRecord {
    pub seed: usize,
    pub fold: usize,
    pub method: Method,
    pub target_id: String,
    pub dimension: Dimension,
    pub source_id: String,
    pub enrollment_ccc: Option<f64>,
    pub enrollment_size: usize,
}

impl MappingRecord {
    pub fn from_table(seed: usize, fold: usize, method: Method, table: &MappingTable) -> Vec<Self> {
        table
            .entries()
            .map(|e| MappingRecord {
                seed,
                fold,
                method,
                target_id: e.target_id.clone(),
                dimension: e.dimension,
                source_id: e.source_id.clone(),
                enrollment_ccc: e.enrollment_ccc,
                enrollment_size: e.enrollment_size,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub seed: usize,
    /// Unset when the failure happened before any fold (pre-training).
    pub fold: Option<usize>,
    pub stage: String,
    pub kind: String,
    pub message: String,
}

impl CellError {
    pub fn new(seed: usize, fold: Option<usize>, stage: &str, err: &Error) -> Self {
        Self {
            seed,
            fold,
            stage: stage.to_owned(),
            kind: err.kind().to_owned(),
            message: err.to_string(),
        }
    }
}

pub const RECORDS_FILE: &str = "records.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const PAIRS_FILE: &str = "pairs.csv";
pub const MAPPINGS_FILE: &str = "mappings.csv";
pub const SOURCE_HEADS_FILE: &str = "source_heads.csv";
pub const ERRORS_FILE: &str = "errors.json";

pub fn to_csv_string<T: Serialize>(rows: &[T], header: &[&str]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::InvalidInput(e.to_string()))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    std::fs::write(path, to_csv_string(rows, header)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, header: &[&str]) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let found = r.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::parse(path, format!("expected header {}", header.join(","))));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::parse(path, format!("row {}: {e}", i + 1))))
        .collect()
}

pub const RECORDS_HEADER: &[&str] = &[
    "method",
    "seed",
    "fold",
    "dimension",
    "ccc_ind",
    "ccc_agg",
    "n_annotators_scored",
];
pub const SWEEP_HEADER: &[&str] = &[
    "seed",
    "fold",
    "enrollment",
    "dimension",
    "ccc_ind",
    "ccc_agg",
    "n_annotators_scored",
    "planted_recovery",
];
pub const PAIRS_HEADER: &[&str] = &[
    "seed",
    "fold",
    "target_id",
    "dimension",
    "source_id",
    "enrollment_ccc",
    "source_train_ccc",
    "test_ccc",
];
pub const SOURCE_HEADS_HEADER: &[&str] = &["seed", "source_id", "dimension", "ccc"];
pub const MAPPINGS_HEADER: &[&str] = &[
    "seed",
    "fold",
    "method",
    "target_id",
    "dimension",
    "source_id",
    "enrollment_ccc",
    "enrollment_size",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_roundtrip_full_precision() {
        let rows = vec![
            MetricRecord {
                method: Method::AggFtFull,
                seed: 1,
                fold: 4,
                dimension: Dimension::Valence,
                ccc_ind: 0.1 + 0.2,
                ccc_agg: -1.0 / 3.0,
                n_annotators_scored: 17,
            },
            MetricRecord {
                method: Method::PtMapped,
                seed: 0,
                fold: 0,
                dimension: Dimension::Activation,
                ccc_ind: 1e-17,
                ccc_agg: 0.5,
                n_annotators_scored: 2,
            },
        ];
        let text = to_csv_string(&rows, RECORDS_HEADER).unwrap();
        assert!(text.starts_with("method,seed,fold,dimension,ccc_ind,ccc_agg,n_annotators_scored\n"));
        assert!(text.contains("Agg-FT-Full,1,4,valence,"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, &text).unwrap();
        let back: Vec<MetricRecord> = read_csv(&path, RECORDS_HEADER).unwrap();
        assert_eq!(back, rows);
        assert!(read_csv::<MetricRecord>(&path, SWEEP_HEADER).is_err());
    }

    #[test]
    fn sweep_rows_with_optional_fields() {
        let rows = vec![SweepRecord {
            seed: 0,
            fold: 1,
            enrollment: EnrollmentSize::All,
            dimension: Dimension::Activation,
            ccc_ind: 0.25,
            ccc_agg: 0.5,
            n_annotators_scored: 3,
            planted_recovery: None,
        }];
        let text = to_csv_string(&rows, SWEEP_HEADER).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("0,1,all,activation,"));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, &text).unwrap();
        assert_eq!(read_csv::<SweepRecord>(&path, SWEEP_HEADER).unwrap(), rows);
    }
}
