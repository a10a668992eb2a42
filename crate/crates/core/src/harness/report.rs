//! Report assembly from per-cell records. Everything here is a pure
//! function of the records, so a report can be rebuilt from the CSV files a
//! run leaves behind.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::*;
use super::ExperimentConfig;
use crate::corpus::{Dimension, EnrollmentSize};
use crate::error::{Error, Result};
use crate::mapper::{selection_entropy, MappingEntry, MappingTable, Method};
use crate::metrics::{mean_sd, median, paired_t_test, pcc, PairedTestResult};

/// Raw per-cell material a report is computed from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportInputs {
    pub records: Vec<MetricRecord>,
    pub sweep: Vec<SweepRecord>,
    pub pairs: Vec<PairRecord>,
    pub mappings: Vec<MappingRecord>,
    pub source_heads: Vec<SourceHeadRecord>,
    pub errors: Vec<CellError>,
}

impl ReportInputs {
    /// Canonical order, independent of the order cells finished in.
    pub fn sort(&mut self) {
        self.records
            .sort_by_key(|r| (r.method, r.seed, r.fold, r.dimension));
        self.sweep
            .sort_by_key(|r| (r.seed, r.fold, r.enrollment, r.dimension));
        self.pairs
            .sort_by(|a, b| (a.seed, a.fold, &a.target_id, a.dimension).cmp(&(b.seed, b.fold, &b.target_id, b.dimension)));
        self.mappings.sort_by(|a, b| {
            (a.method, a.seed, a.fold, &a.target_id, a.dimension).cmp(&(b.method, b.seed, b.fold, &b.target_id, b.dimension))
        });
        self.source_heads
            .sort_by(|a, b| (a.seed, &a.source_id, a.dimension).cmp(&(b.seed, &b.source_id, b.dimension)));
        self.errors
            .sort_by(|a, b| (a.seed, a.fold, &a.stage).cmp(&(b.seed, b.fold, &b.stage)));
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join(RECORDS_FILE), &self.records, RECORDS_HEADER)?;
        write_csv(&dir.join(SWEEP_FILE), &self.sweep, SWEEP_HEADER)?;
        write_csv(&dir.join(PAIRS_FILE), &self.pairs, PAIRS_HEADER)?;
        write_csv(&dir.join(MAPPINGS_FILE), &self.mappings, MAPPINGS_HEADER)?;
        write_csv(&dir.join(SOURCE_HEADS_FILE), &self.source_heads, SOURCE_HEADS_HEADER)?;
        let path = dir.join(ERRORS_FILE);
        let text = serde_json::to_string_pretty(&self.errors).expect("errors serialize");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads what [`ReportInputs::write`] wrote. Only the records file is
    /// required; the others default to empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let records_path = dir.join(RECORDS_FILE);
        if !records_path.exists() {
            return Err(Error::MissingFile(records_path));
        }
        fn opt<T: serde::de::DeserializeOwned>(p: &Path, h: &[&str]) -> Result<Vec<T>> {
            if p.exists() {
                read_csv(p, h)
            } else {
                Ok(Vec::new())
            }
        }
        let errors_path = dir.join(ERRORS_FILE);
        let errors = if errors_path.exists() {
            let text = std::fs::read_to_string(&errors_path).map_err(|e| Error::io(&errors_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::parse(&errors_path, e.to_string()))?
        } else {
            Vec::new()
        };
        let mut out = Self {
            records: read_csv(&records_path, RECORDS_HEADER)?,
            sweep: opt(&dir.join(SWEEP_FILE), SWEEP_HEADER)?,
            pairs: opt(&dir.join(PAIRS_FILE), PAIRS_HEADER)?,
            mappings: opt(&dir.join(MAPPINGS_FILE), MAPPINGS_HEADER)?,
            source_heads: opt(&dir.join(SOURCE_HEADS_FILE), SOURCE_HEADS_HEADER)?,
            errors,
        };
        out.sort();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub crate_version: String,
    pub base_seed: u64,
    pub n_seeds: usize,
    pub n_folds: usize,
    pub model_seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub dimension: Dimension,
    pub n_cells: usize,
    pub ccc_ind_mean: f64,
    pub ccc_ind_sd: f64,
    pub ccc_agg_mean: f64,
    pub ccc_agg_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    CccInd,
    CccAgg,
}

impl Metric {
    pub const BOTH: [Metric; 2] = [Metric::CccInd, Metric::CccAgg];

    fn of(self, r: &MetricRecord) -> f64 {
        match self {
            Metric::CccInd => r.ccc_ind,
            Metric::CccAgg => r.ccc_agg,
        }
    }
}

/// `method` against PT-Mapped, paired over the (seed, fold) cells both have.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub method: Method,
    pub metric: Metric,
    pub dimension: Dimension,
    pub n_pairs: usize,
    pub test: Option<PairedTestResult>,
    /// "†" significant decrease, "*" significant increase, "" otherwise.
    pub marker: String,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRow {
    pub dimension: Dimension,
    pub bin: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub count: usize,
    pub mean_test_ccc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub dimension: Dimension,
    pub n_pairs: usize,
    pub pcc: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq1 {
    pub correlation: Vec<CorrelationRow>,
    pub histogram: Vec<BinRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub dimension: Dimension,
    pub selected_median: Option<f64>,
    pub population_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq2 {
    pub bins: Vec<BinRow>,
    pub medians: Vec<MedianRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub enrollment: EnrollmentSize,
    pub dimension: Dimension,
    pub n_cells: usize,
    pub ccc_ind_mean: f64,
    pub ccc_ind_sd: f64,
    pub ccc_agg_mean: f64,
    pub ccc_agg_sd: f64,
    pub planted_recovery_mean: Option<f64>,
    pub planted_recovery_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub method: Method,
    pub dimension: Dimension,
    pub n_targets: usize,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEntropyRow {
    pub method: Method,
    pub target_id: String,
    pub dimension: Dimension,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rq4 {
    pub repetitions: usize,
    /// log2(repetitions): every repetition choosing a different source.
    pub max_entropy: f64,
    pub summary: Vec<EntropyRow>,
    pub per_target: Vec<TargetEntropyRow>,
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub dimension: Dimension,
    pub rank: usize,
    pub method: Method,
    pub ccc_agg_mean: f64,
    pub ccc_agg_sd: f64,
    pub marker: String,
    pub best_non_oracle: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub provenance: Provenance,
    pub summary: Vec<SummaryRow>,
    pub significance: Vec<SignificanceRow>,
    pub rq1: Option<Rq1>,
    pub rq2: Option<Rq2>,
    pub rq3: Vec<SweepRow>,
    pub rq4: Option<Rq4>,
    pub rq5: Vec<RankingRow>,
    pub errors: Vec<CellError>,
}

impl ExperimentReport {
    pub fn summary_for(&self, method: Method, dim: Dimension) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.method == method && r.dimension == dim)
    }

    pub fn significance_for(&self, method: Method, metric: Metric, dim: Dimension) -> Option<&SignificanceRow> {
        self.significance
            .iter()
            .find(|r| r.method == method && r.metric == metric && r.dimension == dim)
    }

    pub fn rq3_for(&self, n: EnrollmentSize, dim: Dimension) -> Option<&SweepRow> {
        self.rq3.iter().find(|r| r.enrollment == n && r.dimension == dim)
    }

    /// JSON with every non-integer number rounded to 3 decimals.
    pub fn to_json_string(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_numbers(&mut v, 3);
        serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
    }
}

fn round_to(x: f64, places: i32) -> f64 {
    let k = 10f64.powi(places);
    let r = (x * k).round() / k;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn round_numbers(v: &mut serde_json::Value, places: i32) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            let x = round_to(n.as_f64().expect("f64"), places);
            *v = serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, serde_json::Value::Number);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(|x| round_numbers(x, places)),
        serde_json::Value::Object(map) => map.values_mut().for_each(|x| round_numbers(x, places)),
        _ => {}
    }
}

pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    let mut by: BTreeMap<(Method, Dimension), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by.entry((r.method, r.dimension)).or_default().push(r);
    }
    by.into_iter()
        .map(|((method, dimension), rs)| {
            let (ind_m, ind_sd) = mean_sd(&rs.iter().map(|r| r.ccc_ind).collect::<Vec<_>>());
            let (agg_m, agg_sd) = mean_sd(&rs.iter().map(|r| r.ccc_agg).collect::<Vec<_>>());
            SummaryRow {
                method,
                dimension,
                n_cells: rs.len(),
                ccc_ind_mean: ind_m,
                ccc_ind_sd: ind_sd,
                ccc_agg_mean: agg_m,
                ccc_agg_sd: agg_sd,
            }
        })
        .collect()
}

fn marker(test: &PairedTestResult) -> &'static str {
    match (test.significant_at_95, test.mean_difference) {
        (true, d) if d < 0.0 => "†",
        (true, d) if d > 0.0 => "*",
        _ => "",
    }
}

pub fn significance(records: &[MetricRecord]) -> Vec<SignificanceRow> {
    let mut cells: BTreeMap<(Method, Dimension), BTreeMap<(usize, usize), &MetricRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method, r.dimension)).or_default().insert((r.seed, r.fold), r);
    }
    let methods: BTreeSet<Method> = records.iter().map(|r| r.method).collect();
    let mut out = Vec::new();
    for &method in methods.iter().filter(|&&m| m != Method::PtMapped) {
        for metric in Metric::BOTH {
            for dim in Dimension::BOTH {
                let (Some(base), Some(other)) = (cells.get(&(Method::PtMapped, dim)), cells.get(&(method, dim))) else {
                    continue;
                };
                let (a, b): (Vec<f64>, Vec<f64>) = other
                    .iter()
                    .filter_map(|(k, r)| base.get(k).map(|m| (metric.of(r), metric.of(m))))
                    .unzip();
                let (test, note) = match paired_t_test(&a, &b) {
                    Ok(t) => (Some(t), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                out.push(SignificanceRow {
                    method,
                    metric,
                    dimension: dim,
                    n_pairs: a.len(),
                    marker: test.as_ref().map_or("", marker).to_owned(),
                    test,
                    note,
                });
            }
        }
    }
    out
}

/// First bin (-inf, 0), then four equal-width bins over [0, 1]; values
/// above 1 land in the last bin.
pub const BIN_LABELS: [&str; 5] = ["(-inf,0)", "[0,0.25)", "[0.25,0.5)", "[0.5,0.75)", "[0.75,1]"];
const BIN_BOUNDS: [(Option<f64>, Option<f64>); 5] = [
    (None, Some(0.0)),
    (Some(0.0), Some(0.25)),
    (Some(0.25), Some(0.5)),
    (Some(0.5), Some(0.75)),
    (Some(0.75), Some(1.0)),
];

pub fn bin_index(x: f64) -> usize {
    if x < 0.0 {
        0
    } else {
        1 + ((x / 0.25).floor() as usize).min(3)
    }
}

/// Mean `value` of the points in each bin of `key`, every bin emitted.
fn binned(points: &[(Dimension, f64, f64)]) -> Vec<BinRow> {
    let mut out = Vec::new();
    for dim in Dimension::BOTH {
        let mut bins: [Vec<f64>; 5] = Default::default();
        for &(d, key, value) in points {
            if d == dim {
                bins[bin_index(key)].push(value);
            }
        }
        for (i, vals) in bins.iter().enumerate() {
            out.push(BinRow {
                dimension: dim,
                bin: BIN_LABELS[i].to_owned(),
                lower: BIN_BOUNDS[i].0,
                upper: BIN_BOUNDS[i].1,
                count: vals.len(),
                mean_test_ccc: (!vals.is_empty()).then(|| mean_sd(vals).0),
            });
        }
    }
    out
}

/// Enrollment CCC against test CCC of every mapped (target, seed, fold).
pub fn rq1(pairs: &[PairRecord]) -> Rq1 {
    let points: Vec<(Dimension, f64, f64)> = pairs
        .iter()
        .filter_map(|p| Some((p.dimension, p.enrollment_ccc, p.test_ccc?)))
        .collect();
    let correlation = Dimension::BOTH
        .iter()
        .map(|&dim| {
            let (x, y): (Vec<f64>, Vec<f64>) =
                points.iter().filter(|p| p.0 == dim).map(|p| (p.1, p.2)).unzip();
            let (pcc, note) = if x.len() < 2 {
                (None, Some("fewer than 2 pairs".to_owned()))
            } else {
                match pcc(&x, &y) {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e.to_string())),
                }
            };
            CorrelationRow {
                dimension: dim,
                n_pairs: x.len(),
                pcc,
                note,
            }
        })
        .collect();
    Rq1 {
        correlation,
        histogram: binned(&points),
    }
}

/// Test CCC binned by the selected head's source-validation CCC.
pub fn rq2(pairs: &[PairRecord], source_heads: &[SourceHeadRecord]) -> Rq2 {
    let points: Vec<(Dimension, f64, f64)> = pairs
        .iter()
        .filter_map(|p| Some((p.dimension, p.source_train_ccc?, p.test_ccc?)))
        .collect();
    let medians = Dimension::BOTH
        .iter()
        .map(|&dim| {
            let selected: Vec<f64> = pairs
                .iter()
                .filter(|p| p.dimension == dim)
                .filter_map(|p| p.source_train_ccc)
                .collect();
            let population: Vec<f64> = source_heads.iter().filter(|h| h.dimension == dim).map(|h| h.ccc).collect();
            MedianRow {
                dimension: dim,
                selected_median: median(&selected),
                population_median: median(&population),
            }
        })
        .collect();
    Rq2 {
        bins: binned(&points),
        medians,
    }
}

pub fn rq3(sweep: &[SweepRecord]) -> Vec<SweepRow> {
    let mut by: BTreeMap<(EnrollmentSize, Dimension), Vec<&SweepRecord>> = BTreeMap::new();
    for r in sweep {
        by.entry((r.enrollment, r.dimension)).or_default().push(r);
    }
    by.into_iter()
        .map(|((enrollment, dimension), rs)| {
            let (ind_m, ind_sd) = mean_sd(&rs.iter().map(|r| r.ccc_ind).collect::<Vec<_>>());
            let (agg_m, agg_sd) = mean_sd(&rs.iter().map(|r| r.ccc_agg).collect::<Vec<_>>());
            let rec: Vec<f64> = rs.iter().filter_map(|r| r.planted_recovery).collect();
            SweepRow {
                enrollment,
                dimension,
                n_cells: rs.len(),
                ccc_ind_mean: ind_m,
                ccc_ind_sd: ind_sd,
                ccc_agg_mean: agg_m,
                ccc_agg_sd: agg_sd,
                planted_recovery_mean: (!rec.is_empty()).then(|| mean_sd(&rec).0),
                planted_recovery_min: rec.iter().copied().reduce(f64::min),
            }
        })
        .collect()
}

fn tables_for(mappings: &[MappingRecord], method: Method) -> Vec<MappingTable> {
    let mut by: BTreeMap<(usize, usize), MappingTable> = BTreeMap::new();
    for m in mappings.iter().filter(|m| m.method == method) {
        by.entry((m.seed, m.fold)).or_default().insert(MappingEntry {
            target_id: m.target_id.clone(),
            dimension: m.dimension,
            source_id: m.source_id.clone(),
            enrollment_ccc: m.enrollment_ccc,
            enrollment_size: m.enrollment_size,
        });
    }
    by.into_values().collect()
}

/// Selection entropy of mapped and random pairings across all repetitions.
pub fn rq4(mappings: &[MappingRecord]) -> Result<Rq4> {
    let mut summary = Vec::new();
    let mut per_target = Vec::new();
    let mut excluded = BTreeSet::new();
    let mut repetitions = 0;
    for method in [Method::PtMapped, Method::PtRandom] {
        let tables = tables_for(mappings, method);
        if tables.is_empty() {
            continue;
        }
        if tables.len() < 2 {
            return Err(Error::InvalidInput("selection stability needs at least 2 repetitions".into()));
        }
        repetitions = repetitions.max(tables.len());
        let h = selection_entropy(&tables)?;
        excluded.extend(h.excluded);
        for dim in Dimension::BOTH {
            let vals: Vec<f64> = h.per_target.values().map(|e| e[dim.index()]).collect();
            let (mean, sd) = mean_sd(&vals);
            summary.push(EntropyRow {
                method,
                dimension: dim,
                n_targets: vals.len(),
                mean,
                sd,
            });
        }
        for (target, e) in &h.per_target {
            for dim in Dimension::BOTH {
                per_target.push(TargetEntropyRow {
                    method,
                    target_id: target.clone(),
                    dimension: dim,
                    entropy: e[dim.index()],
                });
            }
        }
    }
    Ok(Rq4 {
        repetitions,
        max_entropy: (repetitions as f64).log2(),
        summary,
        per_target,
        excluded: excluded.into_iter().collect(),
    })
}

/// CCC_agg ranking per dimension with markers relative to PT-Mapped.
pub fn rq5(summary: &[SummaryRow], sig: &[SignificanceRow]) -> Vec<RankingRow> {
    let mut out = Vec::new();
    for dim in Dimension::BOTH {
        let mut rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.dimension == dim).collect();
        rows.sort_by(|a, b| b.ccc_agg_mean.total_cmp(&a.ccc_agg_mean).then(a.method.cmp(&b.method)));
        let best = rows.iter().find(|r| !r.method.is_oracle()).map(|r| r.method);
        for (i, r) in rows.iter().enumerate() {
            let marker = sig
                .iter()
                .find(|s| s.method == r.method && s.metric == Metric::CccAgg && s.dimension == dim)
                .map_or(String::new(), |s| s.marker.clone());
            out.push(RankingRow {
                dimension: dim,
                rank: i + 1,
                method: r.method,
                ccc_agg_mean: r.ccc_agg_mean,
                ccc_agg_sd: r.ccc_agg_sd,
                marker,
                best_non_oracle: best == Some(r.method),
            });
        }
    }
    out
}

pub fn build_report(config_hash: &str, config: &ExperimentConfig, inputs: &ReportInputs) -> Result<ExperimentReport> {
    if inputs.records.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no metric records ({} cell errors)",
            inputs.errors.len()
        )));
    }
    let summary = summarize(&inputs.records);
    let significance = significance(&inputs.records);
    let has_pairs = !inputs.pairs.is_empty();
    let rq4 = if inputs.mappings.is_empty() {
        None
    } else {
        match rq4(&inputs.mappings) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("selection stability skipped: {e}");
                None
            }
        }
    };
    Ok(ExperimentReport {
        provenance: Provenance {
            config_hash: config_hash.to_owned(),
            crate_version: env!("CARGO_PKG_VERSION").to_owned(),
            base_seed: config.base_seed,
            n_seeds: config.n_seeds,
            n_folds: config.n_folds,
            model_seeds: (0..config.n_seeds).map(|i| config.model_seed(i)).collect(),
        },
        rq5: rq5(&summary, &significance),
        rq1: has_pairs.then(|| rq1(&inputs.pairs)),
        rq2: has_pairs.then(|| rq2(&inputs.pairs, &inputs.source_heads)),
        rq3: rq3(&inputs.sweep),
        rq4,
        summary,
        significance,
        errors: inputs.errors.clone(),
    })
}

/// Every mean and sd in `report` must match the statistic recomputed from
/// `records`, to `tol`.
pub fn check_consistency(report: &ExperimentReport, records: &[MetricRecord], tol: f64) -> Result<()> {
    let fresh = summarize(records);
    if fresh.len() != report.summary.len() {
        return Err(Error::InvalidInput(format!(
            "report has {} summary rows, records give {}",
            report.summary.len(),
            fresh.len()
        )));
    }
    for (a, b) in report.summary.iter().zip(&fresh) {
        let close = |x: f64, y: f64| (x - y).abs() <= tol || (x.is_nan() && y.is_nan());
        let ok = a.method == b.method
            && a.dimension == b.dimension
            && a.n_cells == b.n_cells
            && close(a.ccc_ind_mean, b.ccc_ind_mean)
            && close(a.ccc_ind_sd, b.ccc_ind_sd)
            && close(a.ccc_agg_mean, b.ccc_agg_mean)
            && close(a.ccc_agg_sd, b.ccc_agg_sd);
        if !ok {
            return Err(Error::InvalidInput(format!(
                "summary for {} {} does not match its records",
                b.method, b.dimension
            )));
        }
    }
    Ok(())
}

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RQ1_FILE: &str = "rq1_histogram.csv";
pub const RQ2_FILE: &str = "rq2_bins.csv";
pub const RQ3_FILE: &str = "rq3_sweep.csv";
pub const RQ4_FILE: &str = "rq4_entropy.csv";
pub const RQ5_FILE: &str = "rq5_ranking.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Plot-ready tables rounded like the report.
fn write_table(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::InvalidInput(e.to_string());
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(&r).map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{:.3}", round_to(x, 3))
    } else {
        String::new()
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map_or(String::new(), num)
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, report.to_json_string()).map_err(|e| Error::io(&path, e))?;

    write_table(
        &dir.join(SUMMARY_FILE),
        &["method", "dimension", "n_cells", "ccc_ind_mean", "ccc_ind_sd", "ccc_agg_mean", "ccc_agg_sd", "ccc_ind_marker", "ccc_agg_marker"],
        report
            .summary
            .iter()
            .map(|r| {
                let m = |metric| {
                    report
                        .significance_for(r.method, metric, r.dimension)
                        .map_or(String::new(), |s| s.marker.clone())
                };
                vec![
                    r.method.to_string(),
                    r.dimension.to_string(),
                    r.n_cells.to_string(),
                    num(r.ccc_ind_mean),
                    num(r.ccc_ind_sd),
                    num(r.ccc_agg_mean),
                    num(r.ccc_agg_sd),
                    m(Metric::CccInd),
                    m(Metric::CccAgg),
                ]
            })
            .collect(),
    )?;
    let bins = |rows: &[BinRow]| -> Vec<Vec<String>> {
        rows.iter()
            .map(|b| {
                vec![
                    b.dimension.to_string(),
                    b.bin.clone(),
                    b.count.to_string(),
                    opt_num(b.mean_test_ccc),
                ]
            })
            .collect()
    };
    let bin_header = ["dimension", "bin", "count", "mean_test_ccc"];
    if let Some(r) = &report.rq1 {
        write_table(&dir.join(RQ1_FILE), &bin_header, bins(&r.histogram))?;
    }
    if let Some(r) = &report.rq2 {
        write_table(&dir.join(RQ2_FILE), &bin_header, bins(&r.bins))?;
    }
    if !report.rq3.is_empty() {
        write_table(
            &dir.join(RQ3_FILE),
            &["enrollment", "dimension", "n_cells", "ccc_ind_mean", "ccc_ind_sd", "ccc_agg_mean", "ccc_agg_sd", "planted_recovery_mean"],
            report
                .rq3
                .iter()
                .map(|r| {
                    vec![
                        r.enrollment.to_string(),
                        r.dimension.to_string(),
                        r.n_cells.to_string(),
                        num(r.ccc_ind_mean),
                        num(r.ccc_ind_sd),
                        num(r.ccc_agg_mean),
                        num(r.ccc_agg_sd),
                        opt_num(r.planted_recovery_mean),
                    ]
                })
                .collect(),
        )?;
    }
    if let Some(r) = &report.rq4 {
        write_table(
            &dir.join(RQ4_FILE),
            &["method", "target_id", "dimension", "entropy"],
            r.per_target
                .iter()
                .map(|t| vec![t.method.to_string(), t.target_id.clone(), t.dimension.to_string(), num(t.entropy)])
                .collect(),
        )?;
    }
    write_table(
        &dir.join(RQ5_FILE),
        &["dimension", "rank", "method", "ccc_agg_mean", "ccc_agg_sd", "marker", "best_non_oracle"],
        report
            .rq5
            .iter()
            .map(|r| {
                vec![
                    r.dimension.to_string(),
                    r.rank.to_string(),
                    r.method.to_string(),
                    num(r.ccc_agg_mean),
                    num(r.ccc_agg_sd),
                    r.marker.clone(),
                    r.best_non_oracle.to_string(),
                ]
            })
            .collect(),
    )
}

/// Load a report written by [`write_report`] and check its summary against
/// the records next to it.
pub fn load_and_check(dir: &Path) -> Result<(ExperimentReport, ReportInputs)> {
    let path = dir.join(REPORT_FILE);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let report: ExperimentReport = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
    let inputs = ReportInputs::load(dir)?;
    check_consistency(&report, &inputs.records, 5e-4 + 1e-12)?;
    Ok((report, inputs))
}
