//! Experiment orchestration: seeds x folds over a source and a target
//! corpus, every adaptation method, metrics and the RQ analyses.

pub mod records;
pub mod report;
pub mod scoring;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    load_dataset, make_folds, preprocess, FoldSpec, sample_enrollment, split_groups, Dataset, Dimension, EnrollmentSize,
    PreprocessOptions, Split,
};
use crate::error::{Error, Result};
use crate::mapper::{
    map_random, map_similar, oracle_ground_truth, predict_aggregate_head, predict_all_heads, predict_mapped,
    HeadOutputs, MappingTable, Method, MethodPredictions, SelectionMode,
};
use crate::net::{
    aggregate_items, finetune_aggregate, individual_items, per_head_ccc, train_aggregate, train_aggregate_epochs,
    train_individual, FinetuneMode, ModelConfig, ModelParams, TrainConfig,
};
use crate::seeding;
use crate::sim::{gen_benchmark, SimConfig};

pub use records::{CellError, MappingRecord, MetricRecord, PairRecord, SourceHeadRecord, SweepRecord};
pub use report::{build_report, check_consistency, load_and_check, write_report, ExperimentReport, Metric, ReportInputs};
pub use scoring::{metric_ccc_agg, metric_ccc_ind, per_annotator_ccc, IndividualScore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// Generate a source corpus and a planted target corpus.
    Simulated(SimConfig),
    Files {
        source_manifest: PathBuf,
        target_manifest: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulated(SimConfig::default())
    }
}

fn default_enrollment_sizes() -> Vec<EnrollmentSize> {
    let mut v: Vec<EnrollmentSize> = [5, 10, 15, 20, 25, 30].map(EnrollmentSize::Count).to_vec();
    v.push(EnrollmentSize::All);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub n_seeds: usize,
    pub n_folds: usize,
    pub base_seed: u64,
    /// Enrollment sizes for the mapping sweep; `"all"` uses every FT-train
    /// annotation of the target.
    pub enrollment_sizes: Vec<EnrollmentSize>,
    pub methods: Vec<Method>,
    /// `rng_seed` is ignored; each seed derives its own.
    pub train: TrainConfig,
    pub hidden_width: usize,
    pub dropout_rate: f64,
    /// Aggregate epochs before copying the aggregate head into every
    /// annotator head.
    pub aggregate_init_epochs: usize,
    pub selection: SelectionMode,
    /// Held-out share of groups for source validation and target FT-val.
    pub validation_fraction: f64,
    pub min_annotations: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            n_seeds: 6,
            n_folds: 5,
            base_seed: 0,
            enrollment_sizes: default_enrollment_sizes(),
            methods: Method::ALL.to_vec(),
            train: TrainConfig::default(),
            hidden_width: 32,
            dropout_rate: 0.2,
            aggregate_init_epochs: 5,
            selection: SelectionMode::PerDimension,
            validation_fraction: 0.2,
            min_annotations: 30,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.n_folds < 2 {
            return Err(Error::Config("n_folds must be at least 2".into()));
        }
        if self.enrollment_sizes.is_empty() {
            return Err(Error::Config("enrollment_sizes must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        self.train.validate()?;
        self.model_config(Vec::new(), 1).validate()?;
        if let DataSource::Simulated(sim) = &self.data {
            sim.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative manifest paths are resolved against the config file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DataSource::Files {
            source_manifest,
            target_manifest,
        } = &mut cfg.data
        {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [source_manifest, target_manifest] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 (hex) of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes to JSON");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn has(&self, method: Method) -> bool {
        self.methods.contains(&method)
    }

    fn model_config(&self, annotator_ids: Vec<String>, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            feature_dim,
            hidden_width: self.hidden_width,
            dropout_rate: self.dropout_rate,
            annotator_ids,
        }
    }

    pub fn model_seed(&self, seed_index: usize) -> u64 {
        seeding::derive(self.base_seed, &[seeding::TAG_MODEL, seed_index as u64])
    }

    pub fn enrollment_seed(&self, seed_index: usize, fold: usize) -> u64 {
        seeding::derive(self.base_seed, &[seeding::TAG_ENROLL, seed_index as u64, fold as u64])
    }

    pub fn random_map_seed(&self, seed_index: usize, fold: usize) -> u64 {
        seeding::derive(self.base_seed, &[seeding::TAG_RANDOM_MAP, seed_index as u64, fold as u64])
    }
}

/// One target fold with its FT-train / FT-val / test partition applied and
/// labels preprocessed.
#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub index: usize,
    pub data: Dataset,
    pub ft_train: BTreeSet<String>,
    pub ft_val: BTreeSet<String>,
    pub test: Dataset,
}

#[derive(Debug)]
pub struct PreparedData {
    pub source: Dataset,
    pub source_train: BTreeSet<String>,
    pub source_val: BTreeSet<String>,
    pub folds: Vec<PreparedFold>,
    /// Fold preparation failures: (fold, error).
    pub fold_errors: Vec<(usize, Error)>,
    /// Planted target -> source pairs when the data is simulated.
    pub planted: Option<BTreeMap<String, String>>,
}

pub fn load_corpora(config: &ExperimentConfig) -> Result<(Dataset, Dataset, Option<BTreeMap<String, String>>)> {
    match &config.data {
        DataSource::Simulated(sim) => {
            let b = gen_benchmark(sim)?;
            let planted = b
                .targets
                .iter()
                .filter_map(|t| Some((t.annotator_id.clone(), t.planted_source.clone()?)))
                .collect();
            Ok((b.source, b.target, Some(planted)))
        }
        DataSource::Files {
            source_manifest,
            target_manifest,
        } => Ok((load_dataset(source_manifest)?, load_dataset(target_manifest)?, None)),
    }
}

/// Preprocess the source corpus. Its own validation hints are used when
/// present, otherwise groups are held out.
pub fn prepare_source(config: &ExperimentConfig, raw: &Dataset) -> Result<(Dataset, BTreeSet<String>, BTreeSet<String>)> {
    let opts = PreprocessOptions {
        min_annotations: config.min_annotations,
        scaling: None,
    };
    let explicit_val = raw.sample_ids_in(Split::Validation);
    let source = preprocess(raw, &opts)?;
    let (train, val) = if explicit_val.is_empty() {
        let ids = source.train_sample_ids();
        split_groups(&source, &ids, config.validation_fraction, config.base_seed)?
    } else {
        (source.sample_ids_in(Split::Train), source.sample_ids_in(Split::Validation))
    };
    Ok((source, train, val))
}

/// Test folds of the target. A corpus that carries test hints is one fold
/// (test vs. everything else); otherwise group folds are cut from the seed.
pub fn target_folds(config: &ExperimentConfig, raw: &Dataset) -> Result<Vec<FoldSpec>> {
    let test = raw.sample_ids_in(Split::Test);
    if test.is_empty() {
        return make_folds(raw, config.n_folds, config.base_seed);
    }
    let train = raw
        .samples()
        .iter()
        .filter(|s| !test.contains(&s.id))
        .map(|s| s.id.clone())
        .collect();
    Ok(vec![FoldSpec {
        fold_index: 0,
        train_sample_ids: train,
        test_sample_ids: test,
    }])
}

/// Split a fold's training part into FT-train / FT-val and preprocess with
/// scaling fitted on FT-train.
pub fn prepare_fold(config: &ExperimentConfig, raw: &Dataset, spec: &FoldSpec) -> Result<PreparedFold> {
    let opts = PreprocessOptions {
        min_annotations: config.min_annotations,
        scaling: None,
    };
    let split_seed = seeding::derive(config.base_seed, &[seeding::TAG_SPLIT, spec.fold_index as u64]);
    let (ft_train, ft_val) = split_groups(raw, &spec.train_sample_ids, config.validation_fraction, split_seed)?;
    let data = preprocess(&raw.with_splits(&ft_train, &ft_val, &spec.test_sample_ids), &opts)?;
    let test_ids = data.sample_ids_in(Split::Test);
    if test_ids.is_empty() {
        return Err(Error::EmptyDataset(format!("fold {} has no test samples left", spec.fold_index)));
    }
    Ok(PreparedFold {
        index: spec.fold_index,
        ft_train: data.sample_ids_in(Split::Train),
        ft_val: data.sample_ids_in(Split::Validation),
        test: data.subset(&test_ids),
        data,
    })
}

/// Load or generate both corpora, preprocess the source, and cut the target
/// into folds. Folds and splits depend only on `base_seed`.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    config.validate()?;
    let (source_raw, target_raw, planted) = load_corpora(config)?;
    if source_raw.feature_dim != target_raw.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "source has {} features, target {}",
            source_raw.feature_dim, target_raw.feature_dim
        )));
    }
    let (source, source_train, source_val) = prepare_source(config, &source_raw)?;
    let mut folds = Vec::new();
    let mut fold_errors = Vec::new();
    for spec in target_folds(config, &target_raw)? {
        match prepare_fold(config, &target_raw, &spec) {
            Ok(f) => folds.push(f),
            Err(e) => {
                log::warn!("fold {} unusable: {e}", spec.fold_index);
                fold_errors.push((spec.fold_index, e));
            }
        }
    }
    Ok(PreparedData {
        source,
        source_train,
        source_val,
        folds,
        fold_errors,
        planted,
    })
}

/// Models pre-trained on the source corpus for one seed.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub seed_index: usize,
    pub model_seed: u64,
    /// Annotator-head model.
    pub individual: ModelParams,
    /// Aggregate-only model (its annotator heads are untrained).
    pub aggregate: ModelParams,
    /// Source-validation CCC per source head: id -> [act, val].
    pub source_head_ccc: BTreeMap<String, [f64; 2]>,
}

pub fn pretrain(config: &ExperimentConfig, data: &PreparedData, seed_index: usize) -> Result<Pretrained> {
    pretrain_source(config, &data.source, &data.source_train, &data.source_val, seed_index)
}

pub fn pretrain_source(
    config: &ExperimentConfig,
    src: &Dataset,
    source_train: &BTreeSet<String>,
    source_val: &BTreeSet<String>,
    seed_index: usize,
) -> Result<Pretrained> {
    let model_seed = config.model_seed(seed_index);
    let train_cfg = TrainConfig {
        rng_seed: model_seed,
        ..config.train.clone()
    };
    let init = ModelParams::init(config.model_config(src.annotator_ids(), src.feature_dim), model_seed)?;
    let agg_train = aggregate_items(src, Some(source_train));
    let agg_val = aggregate_items(src, Some(source_val));

    let aggregate = train_aggregate(&init, &agg_train, &agg_val, &train_cfg)?;
    log::info!(
        "seed {seed_index}: aggregate model best epoch {} (validation {:.4})",
        aggregate.history.best_epoch,
        aggregate.history.best_validation.unwrap_or(f64::NAN)
    );

    let warm = train_aggregate_epochs(&init, &agg_train, &train_cfg, config.aggregate_init_epochs)?;
    let heads = warm.params.init_heads_from_aggregate();
    let ind_train = individual_items(src, &heads, Some(source_train));
    let ind_val = individual_items(src, &heads, Some(source_val));
    let individual = train_individual(&heads, &ind_train, &ind_val, &train_cfg)?;
    log::info!(
        "seed {seed_index}: annotator-head model best epoch {} (validation {:.4})",
        individual.history.best_epoch,
        individual.history.best_validation.unwrap_or(f64::NAN)
    );
    let source_head_ccc = per_head_ccc(&individual.params, &ind_val)?
        .into_iter()
        .map(|(h, c)| (individual.params.annotator_id(h).to_owned(), c))
        .collect();
    Ok(Pretrained {
        seed_index,
        model_seed,
        individual: individual.params,
        aggregate: aggregate.params,
        source_head_ccc,
    })
}

#[derive(Debug, Clone, Default)]
pub struct CellOutput {
    pub records: Vec<MetricRecord>,
    pub sweep: Vec<SweepRecord>,
    pub pairs: Vec<PairRecord>,
    pub mappings: Vec<MappingRecord>,
}

fn planted_recovery(table: &MappingTable, planted: &BTreeMap<String, String>, dim: Dimension) -> Option<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for e in table.entries().filter(|e| e.dimension == dim) {
        if let Some(p) = planted.get(&e.target_id) {
            n += 1;
            hit += usize::from(*p == e.source_id);
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

/// CCC_ind and CCC_agg rows for both dimensions.
pub fn score(method: Method, seed: usize, fold: usize, preds: &MethodPredictions, test: &Dataset) -> Result<Vec<MetricRecord>> {
    let ind = metric_ccc_ind(preds, test)?;
    let agg = metric_ccc_agg(preds, test)?;
    Ok(Dimension::BOTH
        .iter()
        .map(|&dim| MetricRecord {
            method,
            seed,
            fold,
            dimension: dim,
            ccc_ind: ind.ccc[dim.index()],
            ccc_agg: agg[dim.index()],
            n_annotators_scored: ind.n_annotators,
        })
        .collect())
}

/// Run every configured method on one (seed, fold) cell.
pub fn run_cell(
    config: &ExperimentConfig,
    data: &PreparedData,
    pre: &Pretrained,
    fold: &PreparedFold,
) -> Result<CellOutput> {
    let (seed, f) = (pre.seed_index, fold.index);
    let model = &pre.individual;
    let mut out = CellOutput::default();
    let targets: Vec<String> = fold.data.annotator_ids();
    let needs_heads = config.has(Method::PtMapped) || config.has(Method::PtRandom) || config.has(Method::PtAll);
    let outputs = if needs_heads {
        Some(HeadOutputs::for_dataset(model, &fold.data)?)
    } else {
        None
    };
    let cell_seed = seeding::derive(pre.model_seed, &[fold.index as u64]);

    if config.has(Method::PtMapped) {
        let outputs = outputs.as_ref().expect("head outputs computed");
        let enroll_seed = config.enrollment_seed(seed, f);
        let mut sizes = config.enrollment_sizes.clone();
        if !sizes.contains(&EnrollmentSize::All) {
            sizes.push(EnrollmentSize::All);
        }
        for n in sizes {
            let enrollments = targets
                .iter()
                .map(|t| sample_enrollment(&fold.data, &fold.ft_train, t, n, enroll_seed))
                .collect::<Result<Vec<_>>>()?;
            let mapped = map_similar(model, outputs, &enrollments, config.selection);
            if let Some((who, e)) = mapped.errors.first() {
                return Err(Error::InvalidInput(format!("mapping {who} with enrollment {n}: {e}")));
            }
            let preds = predict_mapped(Method::PtMapped, model, outputs, &mapped.table, &fold.test)?;
            let recs = score(Method::PtMapped, seed, f, &preds, &fold.test)?;
            for r in &recs {
                out.sweep.push(SweepRecord {
                    seed,
                    fold: f,
                    enrollment: n,
                    dimension: r.dimension,
                    ccc_ind: r.ccc_ind,
                    ccc_agg: r.ccc_agg,
                    n_annotators_scored: r.n_annotators_scored,
                    planted_recovery: data
                        .planted
                        .as_ref()
                        .and_then(|p| planted_recovery(&mapped.table, p, r.dimension)),
                });
            }
            if n == EnrollmentSize::All {
                let test_ccc = per_annotator_ccc(&preds, &fold.test)?;
                for e in mapped.table.entries() {
                    out.pairs.push(PairRecord {
                        seed,
                        fold: f,
                        target_id: e.target_id.clone(),
                        dimension: e.dimension,
                        source_id: e.source_id.clone(),
                        enrollment_ccc: e.enrollment_ccc.unwrap_or(0.0),
                        source_train_ccc: pre.source_head_ccc.get(&e.source_id).map(|c| c[e.dimension.index()]),
                        test_ccc: test_ccc.get(&e.target_id).map(|c| c[e.dimension.index()]),
                    });
                }
                out.mappings
                    .extend(MappingRecord::from_table(seed, f, Method::PtMapped, &mapped.table));
                out.records.extend(recs);
            }
        }
    }

    if config.has(Method::PtRandom) {
        let outputs = outputs.as_ref().expect("head outputs computed");
        let rseed = config.random_map_seed(seed, f);
        let table = map_random(model, targets.iter().map(String::as_str), rseed)?;
        let preds = predict_mapped(Method::PtRandom, model, outputs, &table, &fold.test)?;
        out.records.extend(score(Method::PtRandom, seed, f, &preds, &fold.test)?);
        out.mappings
            .extend(MappingRecord::from_table(seed, f, Method::PtRandom, &table));
    }

    if config.has(Method::PtAll) {
        let preds = predict_all_heads(model, outputs.as_ref().expect("head outputs computed"), &fold.test)?;
        out.records.extend(score(Method::PtAll, seed, f, &preds, &fold.test)?);
    }

    if config.has(Method::AggPt) {
        let preds = predict_aggregate_head(Method::AggPt, &pre.aggregate, &fold.test)?;
        out.records.extend(score(Method::AggPt, seed, f, &preds, &fold.test)?);
    }

    if config.has(Method::AggFt1) || config.has(Method::AggFtFull) {
        let ft_cfg = TrainConfig {
            rng_seed: cell_seed,
            ..config.train.clone()
        };
        let ft_train = aggregate_items(&fold.data, Some(&fold.ft_train));
        let ft_val = aggregate_items(&fold.data, Some(&fold.ft_val));
        for (method, mode) in [
            (Method::AggFt1, FinetuneMode::OneEpoch),
            (Method::AggFtFull, FinetuneMode::UntilEarlyStop),
        ] {
            if !config.has(method) {
                continue;
            }
            let tuned = finetune_aggregate(&pre.aggregate, &ft_train, Some(&ft_val), mode, &ft_cfg)?;
            let preds = predict_aggregate_head(method, &tuned.params, &fold.test)?;
            out.records.extend(score(method, seed, f, &preds, &fold.test)?);
        }
    }

    if config.has(Method::AggGroundTruth) {
        let preds = oracle_ground_truth(&fold.test)?;
        out.records.extend(score(Method::AggGroundTruth, seed, f, &preds, &fold.test)?);
    }
    Ok(out)
}

/// Everything a run produces; `report` is a pure function of the rest.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub config_hash: String,
    pub inputs: ReportInputs,
    pub report: ExperimentReport,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    let data = prepare_data(config)?;
    run_prepared(config, &data)
}

/// [`run_experiment`] on already prepared data.
pub fn run_prepared(config: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentRun> {
    let mut inputs = ReportInputs::default();
    for seed in 0..config.n_seeds {
        for (fold, e) in &data.fold_errors {
            inputs.errors.push(CellError::new(seed, Some(*fold), "prepare", e));
        }
        let pre = match pretrain(config, data, seed) {
            Ok(p) => p,
            Err(e) => {
                log::error!("seed {seed}: pre-training failed: {e}");
                inputs.errors.push(CellError::new(seed, None, "pretrain", &e));
                continue;
            }
        };
        for (id, c) in &pre.source_head_ccc {
            for dim in Dimension::BOTH {
                inputs.source_heads.push(SourceHeadRecord {
                    seed,
                    source_id: id.clone(),
                    dimension: dim,
                    ccc: c[dim.index()],
                });
            }
        }
        for fold in &data.folds {
            match run_cell(config, data, &pre, fold) {
                Ok(cell) => {
                    log::info!("seed {seed} fold {}: done", fold.index);
                    inputs.records.extend(cell.records);
                    inputs.sweep.extend(cell.sweep);
                    inputs.pairs.extend(cell.pairs);
                    inputs.mappings.extend(cell.mappings);
                }
                Err(e) => {
                    log::error!("seed {seed} fold {}: {e}", fold.index);
                    inputs.errors.push(CellError::new(seed, Some(fold.index), "cell", &e));
                }
            }
        }
    }
    inputs.sort();
    let config_hash = config.hash();
    let report = build_report(&config_hash, config, &inputs)?;
    Ok(ExperimentRun {
        config_hash,
        inputs,
        report,
    })
}

impl ExperimentRun {
    /// Write the config, every record file, the report and its tables.
    pub fn write(&self, dir: &Path, config: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(report::CONFIG_FILE);
        std::fs::write(&path, config.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        self.inputs.write(dir)?;
        report::write_report(dir, &self.report)
    }
}
