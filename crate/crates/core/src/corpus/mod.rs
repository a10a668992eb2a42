//! Samples, per-annotator annotations and the preprocessing pipeline.

mod io;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fit_scaling, ScalingParams};
use crate::seeding;

pub use io::{load_dataset, read_features, write_dataset, write_features, Manifest, FEATURE_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Activation,
    Valence,
}

impl Dimension {
    pub const BOTH: [Dimension; 2] = [Dimension::Activation, Dimension::Valence];

    pub fn as_str(self) -> &'static str {
        match self {
            Dimension::Activation => "activation",
            Dimension::Valence => "valence",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Dimension {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Dimension::Activation),
            "valence" => Ok(Dimension::Valence),
            other => Err(Error::InvalidInput(format!("unknown dimension {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample_id: String,
    pub annotator_id: String,
    pub activation: f64,
    pub valence: f64,
}

impl Annotation {
    pub fn label(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Activation => self.activation,
            Dimension::Valence => self.valence,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    /// Session or speaker; folds never split a group.
    pub group_key: String,
    /// Samples without a hint count as training data.
    pub split: Option<Split>,
}

impl Sample {
    pub fn is_train(&self) -> bool {
        matches!(self.split, None | Some(Split::Train))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimScaling {
    pub activation: ScalingParams,
    pub valence: ScalingParams,
}

impl DimScaling {
    pub fn get(&self, dim: Dimension) -> &ScalingParams {
        match dim {
            Dimension::Activation => &self.activation,
            Dimension::Valence => &self.valence,
        }
    }
}

/// A validated corpus. Samples are sorted by id and annotations by
/// (sample_id, annotator_id).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_dim: usize,
    samples: Vec<Sample>,
    annotations: Vec<Annotation>,
    /// Set once labels have been scaled into [-1, 1].
    scaling: Option<DimScaling>,
    sample_index: HashMap<String, usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        feature_dim: usize,
        mut samples: Vec<Sample>,
        mut annotations: Vec<Annotation>,
    ) -> Result<Self> {
        if feature_dim == 0 {
            return Err(Error::InvalidInput("feature_dim must be positive".into()));
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        let mut sample_index = HashMap::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::DimensionMismatch(format!(
                    "sample {} has {} features, expected {feature_dim}",
                    s.id,
                    s.features.len()
                )));
            }
            if s.group_key.is_empty() {
                return Err(Error::InvalidInput(format!("sample {} has an empty group key", s.id)));
            }
            if sample_index.insert(s.id.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", s.id)));
            }
        }
        annotations.sort_by(|a, b| {
            (a.sample_id.as_str(), a.annotator_id.as_str())
                .cmp(&(b.sample_id.as_str(), b.annotator_id.as_str()))
        });
        for w in annotations.windows(2) {
            if w[0].sample_id == w[1].sample_id && w[0].annotator_id == w[1].annotator_id {
                return Err(Error::DuplicateAnnotation {
                    sample_id: w[0].sample_id.clone(),
                    annotator_id: w[0].annotator_id.clone(),
                });
            }
        }
        for a in &annotations {
            if !sample_index.contains_key(&a.sample_id) {
                return Err(Error::UnknownSample(a.sample_id.clone()));
            }
            if !(a.activation.is_finite() && a.valence.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "non-finite label for sample {} annotator {}",
                    a.sample_id, a.annotator_id
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            feature_dim,
            samples,
            annotations,
            scaling: None,
            sample_index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn scaling(&self) -> Option<&DimScaling> {
        self.scaling.as_ref()
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.sample_index.get(id).map(|&i| &self.samples[i])
    }

    pub fn sample_position(&self, id: &str) -> Option<usize> {
        self.sample_index.get(id).copied()
    }

    /// Sorted distinct annotator ids.
    pub fn annotator_ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.annotations.iter().map(|a| a.annotator_id.as_str()).collect();
        set.into_iter().map(str::to_owned).collect()
    }

    pub fn annotations_by_annotator(&self) -> BTreeMap<&str, Vec<&Annotation>> {
        let mut map: BTreeMap<&str, Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            map.entry(a.annotator_id.as_str()).or_default().push(a);
        }
        map
    }

    pub fn group_keys(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.group_key.as_str()).collect()
    }

    /// Copy with split hints reassigned by membership. Samples in none of
    /// the sets lose their hint.
    pub fn with_splits(
        &self,
        train: &BTreeSet<String>,
        validation: &BTreeSet<String>,
        test: &BTreeSet<String>,
    ) -> Dataset {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.split = if test.contains(&s.id) {
                Some(Split::Test)
            } else if validation.contains(&s.id) {
                Some(Split::Validation)
            } else if train.contains(&s.id) {
                Some(Split::Train)
            } else {
                None
            };
        }
        out
    }

    /// Ids of samples whose hint marks them as training data.
    pub fn train_sample_ids(&self) -> BTreeSet<String> {
        self.samples.iter().filter(|s| s.is_train()).map(|s| s.id.clone()).collect()
    }

    pub fn sample_ids_in(&self, split: Split) -> BTreeSet<String> {
        self.samples
            .iter()
            .filter(|s| s.split == Some(split))
            .map(|s| s.id.clone())
            .collect()
    }

    /// Restrict to the given samples (and their annotations).
    pub fn subset(&self, ids: &BTreeSet<String>) -> Dataset {
        let samples: Vec<Sample> = self.samples.iter().filter(|s| ids.contains(&s.id)).cloned().collect();
        let annotations: Vec<Annotation> = self
            .annotations
            .iter()
            .filter(|a| ids.contains(&a.sample_id))
            .cloned()
            .collect();
        self.rebuild(samples, annotations)
    }

    fn rebuild(&self, samples: Vec<Sample>, annotations: Vec<Annotation>) -> Dataset {
        let sample_index = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Dataset {
            name: self.name.clone(),
            feature_dim: self.feature_dim,
            samples,
            annotations,
            scaling: self.scaling,
            sample_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub min_annotations: usize,
    /// Reuse previously fitted scaling (e.g. the source population's) instead
    /// of fitting on this dataset.
    pub scaling: Option<DimScaling>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            min_annotations: 30,
            scaling: None,
        }
    }
}

/// Filter annotators and samples, then scale labels into [-1, 1].
///
/// Order: drop annotators with fewer than `min_annotations` training
/// annotations, drop validation/test annotations from annotators absent in
/// training, prune samples left without annotations, scale.
pub fn preprocess(dataset: &Dataset, opts: &PreprocessOptions) -> Result<Dataset> {
    if dataset.scaling.is_some() {
        return Err(Error::InvalidInput(format!(
            "dataset {} is already preprocessed",
            dataset.name
        )));
    }
    let is_train = |a: &Annotation| {
        dataset
            .sample(&a.sample_id)
            .map(Sample::is_train)
            .unwrap_or(false)
    };
    let mut train_counts: HashMap<&str, usize> = HashMap::new();
    for a in dataset.annotations.iter().filter(|a| is_train(a)) {
        *train_counts.entry(a.annotator_id.as_str()).or_default() += 1;
    }
    let kept: BTreeSet<&str> = train_counts
        .iter()
        .filter(|(_, &c)| c >= opts.min_annotations)
        .map(|(&id, _)| id)
        .collect();
    let dropped = dataset
        .annotator_ids()
        .into_iter()
        .filter(|id| !kept.contains(id.as_str()))
        .count();
    if dropped > 0 {
        log::debug!(
            "{}: dropping {dropped} annotators below {} training annotations or absent from training",
            dataset.name,
            opts.min_annotations
        );
    }

    let annotations: Vec<Annotation> = dataset
        .annotations
        .iter()
        .filter(|a| kept.contains(a.annotator_id.as_str()))
        .cloned()
        .collect();
    let annotated: BTreeSet<&str> = annotations.iter().map(|a| a.sample_id.as_str()).collect();
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .filter(|s| annotated.contains(s.id.as_str()))
        .cloned()
        .collect();
    if annotations.is_empty() || samples.is_empty() {
        return Err(Error::EmptyDataset(dataset.name.clone()));
    }

    let scaling = match opts.scaling {
        Some(s) => s,
        None => {
            let train: Vec<&Annotation> = annotations.iter().filter(|a| is_train(a)).collect();
            let act: Vec<f64> = train.iter().map(|a| a.activation).collect();
            let val: Vec<f64> = train.iter().map(|a| a.valence).collect();
            DimScaling {
                activation: fit_scaling(&act)?,
                valence: fit_scaling(&val)?,
            }
        }
    };
    let annotations = annotations
        .into_iter()
        .map(|a| Annotation {
            activation: scaling.activation.apply(a.activation),
            valence: scaling.valence.apply(a.valence),
            ..a
        })
        .collect();
    let mut out = dataset.rebuild(samples, annotations);
    out.scaling = Some(scaling);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateLabel {
    pub sample_id: String,
    pub activation_mean: f64,
    pub valence_mean: f64,
    pub annotator_count: usize,
}

impl AggregateLabel {
    pub fn label(&self, dim: Dimension) -> f64 {
        match dim {
            Dimension::Activation => self.activation_mean,
            Dimension::Valence => self.valence_mean,
        }
    }
}

/// Order-independent mean: summing sorted values makes the result exact
/// under any permutation of the inputs.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unweighted per-sample label means, in sample order. Samples without
/// annotations are skipped.
pub fn aggregate_labels(dataset: &Dataset) -> Vec<AggregateLabel> {
    aggregate_annotations(dataset.annotations.iter())
        .into_iter()
        .filter(|l| dataset.sample(&l.sample_id).is_some())
        .collect()
}

/// Aggregate an arbitrary annotation collection, sorted by sample id.
pub fn aggregate_annotations<'a>(annotations: impl IntoIterator<Item = &'a Annotation>) -> Vec<AggregateLabel> {
    let mut by_sample: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for a in annotations {
        let e = by_sample.entry(a.sample_id.as_str()).or_default();
        e.0.push(a.activation);
        e.1.push(a.valence);
    }
    by_sample
        .into_iter()
        .map(|(id, (mut act, mut val))| AggregateLabel {
            sample_id: id.to_owned(),
            annotator_count: act.len(),
            activation_mean: stable_mean(&mut act),
            valence_mean: stable_mean(&mut val),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_sample_ids: BTreeSet<String>,
    pub test_sample_ids: BTreeSet<String>,
}

/// Partition samples into `k` group-independent folds. Group keys are
/// shuffled with the seed and dealt round-robin, so fold sizes (in groups)
/// differ by at most one.
pub fn make_folds(dataset: &Dataset, k: usize, rng_seed: u64) -> Result<Vec<FoldSpec>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let mut groups: Vec<&str> = dataset.group_keys().into_iter().collect();
    if groups.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} group keys cannot form {k} folds",
            groups.len()
        )));
    }
    let mut rng = seeding::rng(rng_seed, &[seeding::TAG_FOLDS]);
    groups.shuffle(&mut rng);
    let fold_of: HashMap<&str, usize> = groups.iter().enumerate().map(|(i, &g)| (g, i % k)).collect();
    Ok((0..k)
        .map(|fold_index| {
            let (test, train): (Vec<&Sample>, Vec<&Sample>) = dataset
                .samples
                .iter()
                .partition(|s| fold_of[s.group_key.as_str()] == fold_index);
            FoldSpec {
                fold_index,
                train_sample_ids: train.into_iter().map(|s| s.id.clone()).collect(),
                test_sample_ids: test.into_iter().map(|s| s.id.clone()).collect(),
            }
        })
        .collect())
}

/// Split `sample_ids` into (kept, held_out) by group key, holding out
/// roughly `held_out_fraction` of the groups (at least one, never all).
pub fn split_groups(
    dataset: &Dataset,
    sample_ids: &BTreeSet<String>,
    held_out_fraction: f64,
    rng_seed: u64,
) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut groups: Vec<&str> = sample_ids
        .iter()
        .filter_map(|id| dataset.sample(id))
        .map(|s| s.group_key.as_str())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if groups.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two groups to hold out validation data, got {}",
            groups.len()
        )));
    }
    let mut rng = seeding::rng(rng_seed, &[seeding::TAG_SPLIT]);
    groups.shuffle(&mut rng);
    let n_held = ((groups.len() as f64 * held_out_fraction).round() as usize).clamp(1, groups.len() - 1);
    let held: BTreeSet<&str> = groups[..n_held].iter().copied().collect();
    let (mut kept, mut out) = (BTreeSet::new(), BTreeSet::new());
    for id in sample_ids {
        if let Some(s) = dataset.sample(id) {
            if held.contains(s.group_key.as_str()) {
                out.insert(id.clone());
            } else {
                kept.insert(id.clone());
            }
        }
    }
    Ok((kept, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EnrollmentSize {
    Count(usize),
    All,
}

impl fmt::Display for EnrollmentSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnrollmentSize::Count(n) => write!(f, "{n}"),
            EnrollmentSize::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for EnrollmentSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(EnrollmentSize::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(EnrollmentSize::Count(n)),
            _ => Err(Error::InvalidInput(format!("bad enrollment size {s:?}"))),
        }
    }
}

impl Serialize for EnrollmentSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EnrollmentSize::Count(n) => s.serialize_u64(*n as u64),
            EnrollmentSize::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for EnrollmentSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(0) => Err(serde::de::Error::custom("enrollment size must be positive")),
            Raw::N(n) => Ok(EnrollmentSize::Count(n as usize)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentSet {
    pub annotator_id: String,
    pub annotations: Vec<Annotation>,
    pub requested: EnrollmentSize,
}

/// Uniform subset (without replacement) of an annotator's annotations on
/// `train_sample_ids`. The subset depends only on (seed, annotator, n), and
/// the returned annotations keep dataset order.
pub fn sample_enrollment(
    dataset: &Dataset,
    train_sample_ids: &BTreeSet<String>,
    annotator_id: &str,
    n: EnrollmentSize,
    rng_seed: u64,
) -> Result<EnrollmentSet> {
    let available: Vec<&Annotation> = dataset
        .annotations
        .iter()
        .filter(|a| a.annotator_id == annotator_id && train_sample_ids.contains(&a.sample_id))
        .collect();
    if available.is_empty() {
        return Err(Error::UnknownAnnotator(format!(
            "{annotator_id} has no annotations in the training fold"
        )));
    }
    let chosen: Vec<Annotation> = match n {
        EnrollmentSize::Count(k) if k < available.len() => {
            let mut rng = seeding::rng(
                rng_seed,
                &[seeding::TAG_ENROLL, seeding::hash_str(annotator_id), k as u64],
            );
            let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, available.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| available[i].clone()).collect()
        }
        _ => available.into_iter().cloned().collect(),
    };
    Ok(EnrollmentSet {
        annotator_id: annotator_id.to_owned(),
        annotations: chosen,
        requested: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_dataset(n_samples: usize, n_groups: usize) -> Dataset {
        let samples = (0..n_samples)
            .map(|i| Sample {
                id: format!("s{i:03}"),
                features: vec![i as f64, 1.0],
                group_key: format!("g{}", i % n_groups),
                split: None,
            })
            .collect();
        let annotations = (0..n_samples)
            .flat_map(|i| {
                ["a", "b"].into_iter().map(move |who| Annotation {
                    sample_id: format!("s{i:03}"),
                    annotator_id: who.into(),
                    activation: (i % 7) as f64,
                    valence: (i % 5) as f64 + if who == "a" { 0.0 } else { 1.0 },
                })
            })
            .collect();
        Dataset::new("toy", 2, samples, annotations).unwrap()
    }

    fn ann(s: &str, a: &str, act: f64, val: f64) -> Annotation {
        Annotation {
            sample_id: s.into(),
            annotator_id: a.into(),
            activation: act,
            valence: val,
        }
    }

    fn sample(id: &str, group: &str, split: Option<Split>) -> Sample {
        Sample {
            id: id.into(),
            features: vec![0.0],
            group_key: group.into(),
            split,
        }
    }

    #[test]
    fn new_rejects_duplicates_and_unknown_samples() {
        let s = vec![sample("x", "g", None)];
        let dup = vec![ann("x", "a", 1.0, 1.0), ann("x", "a", 2.0, 2.0)];
        assert!(matches!(
            Dataset::new("d", 1, s.clone(), dup),
            Err(Error::DuplicateAnnotation { .. })
        ));
        let unknown = vec![ann("y", "a", 1.0, 1.0)];
        assert!(matches!(Dataset::new("d", 1, s, unknown), Err(Error::UnknownSample(_))));
        let bad_dim = vec![Sample {
            features: vec![0.0, 1.0],
            ..sample("x", "g", None)
        }];
        assert!(matches!(
            Dataset::new("d", 1, bad_dim, vec![]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    /// Annotator `a` labels `n_a` training samples, `b` labels 30, `c` only test.
    fn filter_fixture(n_a: usize) -> Dataset {
        let mut samples = Vec::new();
        let mut anns = Vec::new();
        for i in 0..40 {
            let id = format!("tr{i:02}");
            samples.push(sample(&id, &format!("g{}", i % 4), Some(Split::Train)));
            if i < n_a {
                anns.push(ann(&id, "a", i as f64, -(i as f64)));
            }
            if i < 30 {
                anns.push(ann(&id, "b", 1.0 + (i % 3) as f64, 2.0 + (i % 2) as f64));
            }
        }
        for i in 0..5 {
            let id = format!("te{i}");
            samples.push(sample(&id, "gt", Some(Split::Test)));
            anns.push(ann(&id, "b", 1.0, 1.0));
            anns.push(ann(&id, "c", 1.0, 1.0));
        }
        Dataset::new("f", 1, samples, anns).unwrap()
    }

    #[test]
    fn preprocess_min_annotation_boundary() {
        let out = preprocess(&filter_fixture(29), &PreprocessOptions::default()).unwrap();
        assert_eq!(out.annotator_ids(), vec!["b".to_string()]);
        let out = preprocess(&filter_fixture(30), &PreprocessOptions::default()).unwrap();
        assert_eq!(out.annotator_ids(), vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn preprocess_drops_test_only_annotators_and_empty_samples() {
        let out = preprocess(&filter_fixture(30), &PreprocessOptions::default()).unwrap();
        assert!(out.annotations().iter().all(|a| a.annotator_id != "c"));
        // tr30..tr39 were only ever labeled by `a` below the threshold at 29.
        let out29 = preprocess(&filter_fixture(29), &PreprocessOptions::default()).unwrap();
        assert!(out29.sample("tr35").is_none());
        assert!(out29.sample("te0").is_some());
        for a in out.annotations() {
            assert!((-1.0..=1.0).contains(&a.activation));
            assert!((-1.0..=1.0).contains(&a.valence));
        }
    }

    #[test]
    fn preprocess_extremes_map_to_unit_bounds() {
        let out = preprocess(&filter_fixture(30), &PreprocessOptions::default()).unwrap();
        let act: Vec<f64> = out.annotations().iter().map(|a| a.activation).collect();
        assert_eq!(act.iter().cloned().fold(f64::INFINITY, f64::min), -1.0);
        assert_eq!(act.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        assert!(preprocess(&out, &PreprocessOptions::default()).is_err());
    }

    #[test]
    fn preprocess_empty_is_error() {
        let opts = PreprocessOptions {
            min_annotations: 1000,
            scaling: None,
        };
        assert!(matches!(preprocess(&filter_fixture(30), &opts), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn aggregate_examples() {
        let s = vec![sample("x", "g", None), sample("y", "g", None), sample("z", "g", None)];
        let anns = vec![
            ann("x", "a", 0.0, 0.2),
            ann("x", "b", 0.0, 0.4),
            ann("y", "a", 0.7, -0.5),
            ann("z", "a", -1.0, -1.0),
            ann("z", "b", 0.0, 0.0),
            ann("z", "c", 1.0, 1.0),
        ];
        let d = Dataset::new("d", 1, s, anns).unwrap();
        let agg = aggregate_labels(&d);
        assert!((agg[0].valence_mean - 0.3).abs() < 1e-15);
        assert_eq!(agg[1].activation_mean, 0.7);
        assert_eq!(agg[1].valence_mean, -0.5);
        assert_eq!(agg[1].annotator_count, 1);
        assert_eq!(agg[2].valence_mean, 0.0);
        assert_eq!(agg[2].annotator_count, 3);
    }

    #[test]
    fn folds_balanced_independent_deterministic() {
        let d = toy_dataset(50, 10);
        let folds = make_folds(&d, 5, 42).unwrap();
        assert_eq!(folds, make_folds(&d, 5, 42).unwrap());
        let mut union = BTreeSet::new();
        for f in &folds {
            let test_groups: BTreeSet<&str> =
                f.test_sample_ids.iter().map(|id| d.sample(id).unwrap().group_key.as_str()).collect();
            let train_groups: BTreeSet<&str> =
                f.train_sample_ids.iter().map(|id| d.sample(id).unwrap().group_key.as_str()).collect();
            assert_eq!(test_groups.len(), 2);
            assert!(test_groups.is_disjoint(&train_groups));
            assert!(f.train_sample_ids.is_disjoint(&f.test_sample_ids));
            assert_eq!(f.train_sample_ids.len() + f.test_sample_ids.len(), 50);
            for id in &f.test_sample_ids {
                assert!(union.insert(id.clone()), "test sets overlap");
            }
        }
        assert_eq!(union.len(), 50);
        assert!(make_folds(&d, 11, 1).is_err());
    }

    #[test]
    fn enrollment_sizes() {
        let d = toy_dataset(40, 4);
        let train: BTreeSet<String> = d.samples().iter().map(|s| s.id.clone()).collect();
        let e = sample_enrollment(&d, &train, "a", EnrollmentSize::Count(30), 9).unwrap();
        assert_eq!(e.annotations.len(), 30);
        assert!(e.annotations.iter().all(|a| a.annotator_id == "a"));
        let again = sample_enrollment(&d, &train, "a", EnrollmentSize::Count(30), 9).unwrap();
        assert_eq!(e, again);
        let all = sample_enrollment(&d, &train, "a", EnrollmentSize::All, 9).unwrap();
        assert_eq!(all.annotations.len(), 40);
        let few: BTreeSet<String> = train.iter().take(12).cloned().collect();
        let capped = sample_enrollment(&d, &few, "a", EnrollmentSize::Count(30), 9).unwrap();
        assert_eq!(capped.annotations.len(), 12);
        assert!(sample_enrollment(&d, &train, "zz", EnrollmentSize::All, 9).is_err());
        let distinct: BTreeSet<&str> = e.annotations.iter().map(|a| a.sample_id.as_str()).collect();
        assert_eq!(distinct.len(), 30);
    }

    #[test]
    fn split_groups_holds_out_whole_groups() {
        let d = toy_dataset(40, 10);
        let ids: BTreeSet<String> = d.samples().iter().map(|s| s.id.clone()).collect();
        let (kept, held) = split_groups(&d, &ids, 0.2, 3).unwrap();
        assert_eq!(kept.len() + held.len(), 40);
        let hg: BTreeSet<&str> = held.iter().map(|id| d.sample(id).unwrap().group_key.as_str()).collect();
        let kg: BTreeSet<&str> = kept.iter().map(|id| d.sample(id).unwrap().group_key.as_str()).collect();
        assert_eq!(hg.len(), 2);
        assert!(hg.is_disjoint(&kg));
    }

    #[test]
    fn enrollment_size_parsing() {
        assert_eq!("all".parse::<EnrollmentSize>().unwrap(), EnrollmentSize::All);
        assert_eq!("15".parse::<EnrollmentSize>().unwrap(), EnrollmentSize::Count(15));
        assert!("0".parse::<EnrollmentSize>().is_err());
        #[derive(Deserialize)]
        struct W {
            sizes: Vec<EnrollmentSize>,
        }
        let w: W = toml::from_str("sizes = [5, \"all\"]").unwrap();
        assert_eq!(w.sizes, vec![EnrollmentSize::Count(5), EnrollmentSize::All]);
    }

    proptest::proptest! {
        #[test]
        fn aggregate_permutation_invariant(vals in proptest::collection::vec(-1.0..1.0f64, 1..12), rot in 0usize..12) {
            let mk = |vs: &[f64]| -> Vec<Annotation> {
                vs.iter().enumerate().map(|(i, &v)| ann("x", &format!("a{i}"), v, -v)).collect()
            };
            let a = aggregate_annotations(mk(&vals).iter());
            let mut rotated = mk(&vals);
            let k = rot % rotated.len();
            rotated.rotate_left(k);
            rotated.reverse();
            let b = aggregate_annotations(rotated.iter());
            proptest::prop_assert_eq!(a, b);
        }
    }
}
