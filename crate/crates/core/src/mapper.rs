//! Enrollment-based head selection for unseen annotators and the
//! prediction rules of the compared methods.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{aggregate_labels, Dataset, Dimension, EnrollmentSet};
use crate::error::{Error, Result};
use crate::metrics::{ccc_unchecked, entropy_log2};
use crate::net::ModelParams;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Independent argmax per dimension.
    #[default]
    PerDimension,
    /// One source for both dimensions, by mean CCC over the two.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub target_id: String,
    pub dimension: Dimension,
    pub source_id: String,
    /// Unset for random mappings.
    pub enrollment_ccc: Option<f64>,
    pub enrollment_size: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MappingTable {
    entries: BTreeMap<(String, Dimension), MappingEntry>,
}

impl MappingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: MappingEntry) {
        self.entries
            .insert((entry.target_id.clone(), entry.dimension), entry);
    }

    pub fn get(&self, target_id: &str, dim: Dimension) -> Option<&MappingEntry> {
        self.entries.get(&(target_id.to_owned(), dim))
    }

    pub fn source(&self, target_id: &str, dim: Dimension) -> Option<&str> {
        self.get(target_id, dim).map(|e| e.source_id.as_str())
    }

    /// Entries sorted by (target_id, dimension).
    pub fn entries(&self) -> impl Iterator<Item = &MappingEntry> {
        self.entries.values()
    }

    pub fn targets(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(t, _)| t.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every source id must name a head of `model`.
    pub fn validate_against(&self, model: &ModelParams) -> Result<()> {
        for e in self.entries() {
            if model.head_index(&e.source_id).is_none() {
                return Err(Error::UnknownAnnotator(format!(
                    "mapping {} -> {}: no such source head",
                    e.target_id, e.source_id
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target_id", "dimension", "source_id", "enrollment_ccc", "enrollment_size"])
            .expect("in-memory write");
        for e in self.entries() {
            let ccc = e.enrollment_ccc.map(|c| c.to_string()).unwrap_or_default();
            w.write_record([
                e.target_id.as_str(),
                e.dimension.as_str(),
                e.source_id.as_str(),
                ccc.as_str(),
                &e.enrollment_size.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let where_ = Path::new("<mapping>");
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| Error::parse(where_, e.to_string()))?;
        if header != vec!["target_id", "dimension", "source_id", "enrollment_ccc", "enrollment_size"] {
            return Err(Error::parse(where_, format!("unexpected header {header:?}")));
        }
        let mut table = Self::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::parse(where_, e.to_string()))?;
            let bad = |m: String| Error::parse(where_, format!("row {}: {m}", line + 1));
            let dimension: Dimension = rec[1].parse().map_err(|e: Error| bad(e.to_string()))?;
            let enrollment_ccc = match &rec[3] {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            };
            let enrollment_size = rec[4].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
            let entry = MappingEntry {
                target_id: rec[0].to_owned(),
                dimension,
                source_id: rec[2].to_owned(),
                enrollment_ccc,
                enrollment_size,
            };
            if table.get(&entry.target_id, dimension).is_some() {
                return Err(bad(format!("duplicate entry for {} {dimension}", entry.target_id)));
            }
            table.insert(entry);
        }
        Ok(table)
    }
}

/// Every head's output on a set of samples, computed once and shared by all
/// selection and prediction passes over a frozen model.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// sample id -> per dimension, one value per head (model head order).
    heads: BTreeMap<String, [Vec<f64>; 2]>,
    aggregate: BTreeMap<String, [f64; 2]>,
}

impl HeadOutputs {
    pub fn compute<'a>(model: &ModelParams, dataset: &Dataset, sample_ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut heads = BTreeMap::new();
        let mut aggregate = BTreeMap::new();
        for id in sample_ids {
            if heads.contains_key(id) {
                continue;
            }
            let sample = dataset
                .sample(id)
                .ok_or_else(|| Error::UnknownSample(id.to_owned()))?;
            let e = model.embed(&sample.features)?;
            let per_dim = [0, 1].map(|d| model.heads[d].iter().map(|h| h.apply(&e.dims[d])).collect::<Vec<_>>());
            aggregate.insert(id.to_owned(), [0, 1].map(|d| model.aggregate[d].apply(&e.dims[d])));
            heads.insert(id.to_owned(), per_dim);
        }
        Ok(Self { heads, aggregate })
    }

    /// All samples of `dataset`.
    pub fn for_dataset(model: &ModelParams, dataset: &Dataset) -> Result<Self> {
        Self::compute(model, dataset, dataset.samples().iter().map(|s| s.id.as_str()))
    }

    fn get(&self, sample_id: &str) -> Result<&[Vec<f64>; 2]> {
        self.heads
            .get(sample_id)
            .ok_or_else(|| Error::UnknownSample(format!("{sample_id} has no cached head outputs")))
    }

    pub fn head(&self, sample_id: &str, dim: Dimension, head: usize) -> Result<f64> {
        Ok(self.get(sample_id)?[dim.index()][head])
    }

    pub fn aggregate(&self, sample_id: &str, dim: Dimension) -> Result<f64> {
        self.aggregate
            .get(sample_id)
            .map(|a| a[dim.index()])
            .ok_or_else(|| Error::UnknownSample(format!("{sample_id} has no cached head outputs")))
    }
}

/// Mapping plus the targets that could not be mapped.
#[derive(Debug)]
pub struct MapOutcome {
    pub table: MappingTable,
    pub errors: Vec<(String, Error)>,
}

/// Enrollment CCC of every source head against a target's labels:
/// `[dim][head]`.
pub fn enrollment_scores(outputs: &HeadOutputs, model: &ModelParams, enrollment: &EnrollmentSet) -> Result<[Vec<f64>; 2]> {
    if enrollment.annotations.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{}: enrollment needs at least 2 annotations, got {}",
            enrollment.annotator_id,
            enrollment.annotations.len()
        )));
    }
    let rows: Vec<&[Vec<f64>; 2]> = enrollment
        .annotations
        .iter()
        .map(|a| outputs.get(&a.sample_id))
        .collect::<Result<_>>()?;
    Ok(Dimension::BOTH.map(|dim| {
        let d = dim.index();
        let labels: Vec<f64> = enrollment.annotations.iter().map(|a| a.label(dim)).collect();
        let mut preds = vec![0.0; rows.len()];
        (0..model.n_heads())
            .map(|h| {
                for (p, r) in preds.iter_mut().zip(&rows) {
                    *p = r[d][h];
                }
                ccc_unchecked(&preds, &labels)
            })
            .collect()
    }))
}

/// Argmax over heads visited in ascending id order; strict improvement only,
/// so ties keep the smaller id.
fn argmax_by_id(model: &ModelParams, score: impl Fn(usize) -> f64) -> usize {
    let mut order: Vec<usize> = (0..model.n_heads()).collect();
    order.sort_by(|&a, &b| model.annotator_id(a).cmp(model.annotator_id(b)));
    let mut best = order[0];
    let mut best_score = score(best);
    for &h in &order[1..] {
        let s = score(h);
        if s > best_score {
            best = h;
            best_score = s;
        }
    }
    best
}

/// Pick, for each target, the source head with the best enrollment CCC.
/// Targets whose enrollment is unusable are reported in `errors`.
pub fn map_similar(
    model: &ModelParams,
    outputs: &HeadOutputs,
    enrollments: &[EnrollmentSet],
    mode: SelectionMode,
) -> MapOutcome {
    let mut table = MappingTable::new();
    let mut errors = Vec::new();
    if model.n_heads() == 0 {
        for e in enrollments {
            errors.push((e.annotator_id.clone(), Error::InvalidInput("model has no source heads".into())));
        }
        return MapOutcome { table, errors };
    }
    for enrollment in enrollments {
        let scores = match enrollment_scores(outputs, model, enrollment) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("cannot map {}: {e}", enrollment.annotator_id);
                errors.push((enrollment.annotator_id.clone(), e));
                continue;
            }
        };
        let chosen = match mode {
            SelectionMode::PerDimension => [0, 1].map(|d| argmax_by_id(model, |h| scores[d][h])),
            SelectionMode::Joint => {
                let h = argmax_by_id(model, |h| 0.5 * (scores[0][h] + scores[1][h]));
                [h, h]
            }
        };
        for dim in Dimension::BOTH {
            let h = chosen[dim.index()];
            table.insert(MappingEntry {
                target_id: enrollment.annotator_id.clone(),
                dimension: dim,
                source_id: model.annotator_id(h).to_owned(),
                enrollment_ccc: Some(scores[dim.index()][h]),
                enrollment_size: enrollment.annotations.len(),
            });
        }
    }
    MapOutcome { table, errors }
}

/// Uniform source choice per target, shared by both dimensions. A target's
/// draw depends only on (seed, target id).
pub fn map_random<'a>(
    model: &ModelParams,
    target_ids: impl IntoIterator<Item = &'a str>,
    rng_seed: u64,
) -> Result<MappingTable> {
    use rand::Rng as _;
    if model.n_heads() == 0 {
        return Err(Error::InvalidInput("model has no source heads".into()));
    }
    let mut table = MappingTable::new();
    for target in target_ids {
        let mut rng = seeding::rng(rng_seed, &[seeding::TAG_RANDOM_MAP, seeding::hash_str(target)]);
        let h = rng.random_range(0..model.n_heads());
        for dim in Dimension::BOTH {
            table.insert(MappingEntry {
                target_id: target.to_owned(),
                dimension: dim,
                source_id: model.annotator_id(h).to_owned(),
                enrollment_ccc: None,
                enrollment_size: 0,
            });
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PT-Mapped")]
    PtMapped,
    #[serde(rename = "PT-Random")]
    PtRandom,
    #[serde(rename = "PT-All")]
    PtAll,
    #[serde(rename = "Agg-PT")]
    AggPt,
    #[serde(rename = "Agg-FT-1")]
    AggFt1,
    #[serde(rename = "Agg-FT-Full")]
    AggFtFull,
    #[serde(rename = "Agg-GroundTruth")]
    AggGroundTruth,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::PtMapped,
        Method::PtRandom,
        Method::PtAll,
        Method::AggPt,
        Method::AggFt1,
        Method::AggFtFull,
        Method::AggGroundTruth,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PtMapped => "PT-Mapped",
            Method::PtRandom => "PT-Random",
            Method::PtAll => "PT-All",
            Method::AggPt => "Agg-PT",
            Method::AggFt1 => "Agg-FT-1",
            Method::AggFtFull => "Agg-FT-Full",
            Method::AggGroundTruth => "Agg-GroundTruth",
        }
    }

    pub fn is_oracle(self) -> bool {
        self == Method::AggGroundTruth
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodPredictions {
    pub method: Method,
    /// (sample_id, annotator_id) -> [act, val]
    pub individual: BTreeMap<(String, String), [f64; 2]>,
    /// sample_id -> [act, val]
    pub aggregate: BTreeMap<String, [f64; 2]>,
}

impl MethodPredictions {
    pub fn individual(&self, sample_id: &str, annotator_id: &str) -> Option<[f64; 2]> {
        self.individual
            .get(&(sample_id.to_owned(), annotator_id.to_owned()))
            .copied()
    }

    fn check_finite(self) -> Result<Self> {
        let bad = self
            .individual
            .values()
            .chain(self.aggregate.values())
            .any(|p| !(p[0].is_finite() && p[1].is_finite()));
        if bad {
            return Err(Error::NonFinite {
                epoch: 0,
                detail: format!("{} produced a non-finite prediction", self.method),
            });
        }
        Ok(self)
    }
}

/// Per-sample predictions assigned to each of the sample's annotators.
fn broadcast(method: Method, dataset: &Dataset, per_sample: impl Fn(&str) -> Result<[f64; 2]>) -> Result<MethodPredictions> {
    let mut aggregate = BTreeMap::new();
    for s in dataset.samples() {
        aggregate.insert(s.id.clone(), per_sample(&s.id)?);
    }
    let individual = dataset
        .annotations()
        .iter()
        .map(|a| ((a.sample_id.clone(), a.annotator_id.clone()), aggregate[&a.sample_id]))
        .collect();
    MethodPredictions {
        method,
        individual,
        aggregate,
    }
    .check_finite()
}

/// Each annotation is predicted by its annotator's mapped head; a sample's
/// aggregate is the mean over its annotators.
pub fn predict_mapped(
    method: Method,
    model: &ModelParams,
    outputs: &HeadOutputs,
    mapping: &MappingTable,
    dataset: &Dataset,
) -> Result<MethodPredictions> {
    let mut individual = BTreeMap::new();
    let mut sums: BTreeMap<&str, ([f64; 2], usize)> = BTreeMap::new();
    for a in dataset.annotations() {
        let mut pred = [0.0; 2];
        for dim in Dimension::BOTH {
            let source = mapping.source(&a.annotator_id, dim).ok_or_else(|| {
                Error::UnknownAnnotator(format!("{} is not mapped for {dim}", a.annotator_id))
            })?;
            let h = model
                .head_index(source)
                .ok_or_else(|| Error::UnknownAnnotator(format!("source head {source} not in model")))?;
            pred[dim.index()] = outputs.head(&a.sample_id, dim, h)?;
        }
        let slot = sums.entry(&a.sample_id).or_insert(([0.0; 2], 0));
        slot.0[0] += pred[0];
        slot.0[1] += pred[1];
        slot.1 += 1;
        individual.insert((a.sample_id.clone(), a.annotator_id.clone()), pred);
    }
    let aggregate = sums
        .into_iter()
        .map(|(id, (s, n))| (id.to_owned(), [s[0] / n as f64, s[1] / n as f64]))
        .collect();
    MethodPredictions {
        method,
        individual,
        aggregate,
    }
    .check_finite()
}

/// Mean over every source head, used for the sample and all its annotators.
pub fn predict_all_heads(model: &ModelParams, outputs: &HeadOutputs, dataset: &Dataset) -> Result<MethodPredictions> {
    if model.n_heads() == 0 {
        return Err(Error::InvalidInput("model has no source heads".into()));
    }
    broadcast(Method::PtAll, dataset, |id| {
        let h = outputs.get(id)?;
        Ok([0, 1].map(|d| h[d].iter().sum::<f64>() / h[d].len() as f64))
    })
}

/// Aggregate head output, used for the sample and all its annotators.
pub fn predict_aggregate_head(
    method: Method,
    model: &ModelParams,
    dataset: &Dataset,
) -> Result<MethodPredictions> {
    broadcast(method, dataset, |id| {
        let s = dataset.sample(id).ok_or_else(|| Error::UnknownSample(id.to_owned()))?;
        let e = model.embed(&s.features)?;
        Ok([0, 1].map(|d| model.aggregate[d].apply(&e.dims[d])))
    })
}

/// Each sample's mean true label, assigned to all of its annotators.
pub fn oracle_ground_truth(dataset: &Dataset) -> Result<MethodPredictions> {
    let truth: BTreeMap<String, [f64; 2]> = aggregate_labels(dataset)
        .into_iter()
        .map(|l| (l.sample_id, [l.activation_mean, l.valence_mean]))
        .collect();
    let mut p = broadcast(Method::AggGroundTruth, dataset, |id| {
        Ok(truth.get(id).copied().unwrap_or([0.0; 2]))
    })?;
    p.aggregate.retain(|id, _| truth.contains_key(id));
    Ok(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEntropy {
    pub repetitions: usize,
    /// target id -> [act, val] entropy in bits.
    pub per_target: BTreeMap<String, [f64; 2]>,
    /// Targets missing from at least one repetition.
    pub excluded: Vec<String>,
}

/// Entropy of each target's selected source ids across repetitions, for
/// targets present in every repetition.
pub fn selection_entropy(mappings: &[MappingTable]) -> Result<SelectionEntropy> {
    if mappings.is_empty() {
        return Err(Error::InvalidInput("selection entropy needs at least one repetition".into()));
    }
    let all: BTreeSet<&str> = mappings.iter().flat_map(|m| m.targets()).collect();
    let mut per_target = BTreeMap::new();
    let mut excluded = Vec::new();
    for target in all {
        if !mappings.iter().all(|m| Dimension::BOTH.iter().all(|&d| m.get(target, d).is_some())) {
            excluded.push(target.to_owned());
            continue;
        }
        let mut h = [0.0; 2];
        for dim in Dimension::BOTH {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for m in mappings {
                *counts.entry(m.source(target, dim).unwrap()).or_insert(0) += 1;
            }
            h[dim.index()] = entropy_log2(&counts)?;
        }
        per_target.insert(target.to_owned(), h);
    }
    if !excluded.is_empty() {
        log::info!("{} targets absent from some repetitions excluded from entropy", excluded.len());
    }
    Ok(SelectionEntropy {
        repetitions: mappings.len(),
        per_target,
        excluded,
    })
}
