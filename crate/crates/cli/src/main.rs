use std::path::{Path, PathBuf};
use std::process::ExitCode;

use annomap_core::corpus::{load_dataset, sample_enrollment, write_dataset, Dataset, EnrollmentSize};
use annomap_core::harness::records::{write_csv, RECORDS_HEADER, SOURCE_HEADS_FILE, SOURCE_HEADS_HEADER};
use annomap_core::harness::report::{write_report, CONFIG_FILE, REPORT_FILE};
use annomap_core::harness::{
    build_report, load_and_check, load_corpora, pretrain_source, prepare_fold, prepare_source, run_experiment,
    score, target_folds, DataSource, ExperimentConfig, PreparedFold, ReportInputs, SourceHeadRecord,
};
use annomap_core::mapper::{map_random, map_similar, predict_mapped, HeadOutputs, MappingTable, Method};
use annomap_core::net::{load_checkpoint, save_checkpoint, ModelParams};
use annomap_core::sim::gen_benchmark;
use annomap_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "annomap", version, about = "Annotator-specific emotion models with enrollment-based head mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulator seed for `simulate`, seed index for `pretrain`/`map`/
    /// `evaluate`, base seed for `run`/`sweep`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated source and target corpus.
    Simulate(Common),
    /// Pre-train the annotator-head and aggregate models on the source corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Source manifest, overriding the config's data section.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Map each target annotator of one fold to a source head.
    Map {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target manifest, overriding the config's data section.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Enrollment annotations per target: a count or "all".
        #[arg(long, default_value = "all")]
        enrollment: EnrollmentSize,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Uniform random mapping instead of enrollment similarity.
        #[arg(long)]
        random: bool,
    },
    /// Score a mapping on the test part of one fold.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mapping: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Method label for the written records.
        #[arg(long, default_value = "PT-Mapped")]
        method: Method,
    },
    /// Enrollment-size sweep of the mapped method over all seeds and folds.
    Sweep(Common),
    /// Rebuild the report and tables from the record files in --out.
    Report(Common),
    /// Full experiment: every method over all seeds and folds.
    Run(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn simulate(common: &Common) -> Result<serde_json::Value> {
    let cfg = load_config(common)?;
    let DataSource::Simulated(mut sim) = cfg.data else {
        return Err(Error::Config("simulate needs a simulated data section".into()));
    };
    if let Some(seed) = common.seed {
        sim.rng_seed = seed;
    }
    let bench = gen_benchmark(&sim)?;
    let source = write_dataset(&bench.source, &common.out.join("source"), [-1.0, 1.0])?;
    let target = write_dataset(&bench.target, &common.out.join("target"), [-1.0, 1.0])?;
    let mut planted = String::from("target_id,source_id\n");
    for t in &bench.targets {
        planted += &format!("{},{}\n", t.annotator_id, t.planted_source.as_deref().unwrap_or(""));
    }
    let planted_path = common.out.join("planted.csv");
    std::fs::write(&planted_path, planted).map_err(|e| Error::io(&planted_path, e))?;
    Ok(json!({
        "source_manifest": path_str(&source),
        "target_manifest": path_str(&target),
        "planted": path_str(&planted_path),
        "source_annotations": bench.source.annotations().len(),
        "target_annotations": bench.target.annotations().len(),
    }))
}

fn raw_source(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<Dataset> {
    match manifest {
        Some(p) => load_dataset(p),
        None => Ok(load_corpora(cfg)?.0),
    }
}

fn raw_target(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<Dataset> {
    match manifest {
        Some(p) => load_dataset(p),
        None => Ok(load_corpora(cfg)?.1),
    }
}

fn fold_of(cfg: &ExperimentConfig, raw: &Dataset, fold: usize) -> Result<PreparedFold> {
    let specs = target_folds(cfg, raw)?;
    let spec = specs
        .iter()
        .find(|s| s.fold_index == fold)
        .ok_or_else(|| Error::InvalidInput(format!("fold {fold} does not exist ({} folds)", specs.len())))?;
    prepare_fold(cfg, raw, spec)
}

fn seed_index(common: &Common) -> usize {
    common.seed.unwrap_or(0) as usize
}

fn check_features(model: &ModelParams, data: &Dataset) -> Result<()> {
    if model.config.feature_dim != data.feature_dim {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint expects {} features, corpus has {}",
            model.config.feature_dim, data.feature_dim
        )));
    }
    Ok(())
}

fn pretrain(common: &Common, manifest: Option<&Path>) -> Result<serde_json::Value> {
    let cfg = load_config(common)?;
    let seed = seed_index(common);
    let raw = raw_source(&cfg, manifest)?;
    let (source, train, val) = prepare_source(&cfg, &raw)?;
    let pre = pretrain_source(&cfg, &source, &train, &val, seed)?;
    ensure_dir(&common.out)?;
    let model_path = common.out.join("model.ckpt");
    let agg_path = common.out.join("aggregate.ckpt");
    save_checkpoint(&pre.individual, &model_path)?;
    save_checkpoint(&pre.aggregate, &agg_path)?;
    let heads: Vec<SourceHeadRecord> = pre
        .source_head_ccc
        .iter()
        .flat_map(|(id, c)| {
            annomap_core::corpus::Dimension::BOTH.map(|dim| SourceHeadRecord {
                seed,
                source_id: id.clone(),
                dimension: dim,
                ccc: c[dim.index()],
            })
        })
        .collect();
    write_csv(&common.out.join(SOURCE_HEADS_FILE), &heads, SOURCE_HEADS_HEADER)?;
    Ok(json!({
        "checkpoint": path_str(&model_path),
        "aggregate_checkpoint": path_str(&agg_path),
        "source_heads": pre.individual.n_heads(),
        "model_seed": pre.model_seed,
    }))
}

fn map(
    common: &Common,
    checkpoint: &Path,
    manifest: Option<&Path>,
    enrollment: EnrollmentSize,
    fold: usize,
    random: bool,
) -> Result<serde_json::Value> {
    let cfg = load_config(common)?;
    let seed = seed_index(common);
    let model = load_checkpoint(checkpoint)?;
    let prepared = fold_of(&cfg, &raw_target(&cfg, manifest)?, fold)?;
    check_features(&model, &prepared.data)?;
    let targets = prepared.data.annotator_ids();
    let (table, failed) = if random {
        let t = map_random(&model, targets.iter().map(String::as_str), cfg.random_map_seed(seed, fold))?;
        (t, Vec::new())
    } else {
        let outputs = HeadOutputs::for_dataset(&model, &prepared.data)?;
        let enroll_seed = cfg.enrollment_seed(seed, fold);
        let mut sets = Vec::new();
        let mut failed = Vec::new();
        for t in &targets {
            match sample_enrollment(&prepared.data, &prepared.ft_train, t, enrollment, enroll_seed) {
                Ok(s) => sets.push(s),
                Err(e) => failed.push(json!({"annotator": t, "error": e.to_string()})),
            }
        }
        let outcome = map_similar(&model, &outputs, &sets, cfg.selection);
        for (who, e) in outcome.errors {
            log::warn!("{who} not mapped: {e}");
            failed.push(json!({"annotator": who, "error": e.to_string()}));
        }
        (outcome.table, failed)
    };
    if table.is_empty() {
        return Err(Error::InvalidInput("no target annotator could be mapped".into()));
    }
    ensure_dir(&common.out)?;
    let path = common.out.join("mapping.csv");
    table.write_csv(&path)?;
    Ok(json!({
        "mapping": path_str(&path),
        "mapped_targets": table.targets().len(),
        "unmapped": failed,
    }))
}

fn evaluate(
    common: &Common,
    checkpoint: &Path,
    mapping: &Path,
    manifest: Option<&Path>,
    fold: usize,
    method: Method,
) -> Result<serde_json::Value> {
    let cfg = load_config(common)?;
    let seed = seed_index(common);
    let model = load_checkpoint(checkpoint)?;
    let table = MappingTable::read_csv(mapping)?;
    table.validate_against(&model)?;
    let prepared = fold_of(&cfg, &raw_target(&cfg, manifest)?, fold)?;
    check_features(&model, &prepared.test)?;
    let outputs = HeadOutputs::for_dataset(&model, &prepared.test)?;
    let preds = predict_mapped(method, &model, &outputs, &table, &prepared.test)?;
    let records = score(method, seed, fold, &preds, &prepared.test)?;
    ensure_dir(&common.out)?;
    let path = common.out.join("records.csv");
    write_csv(&path, &records, RECORDS_HEADER)?;
    Ok(json!({
        "records": path_str(&path),
        "results": records.iter().map(|r| json!({
            "dimension": r.dimension.as_str(),
            "ccc_ind": r.ccc_ind,
            "ccc_agg": r.ccc_agg,
            "n_annotators_scored": r.n_annotators_scored,
        })).collect::<Vec<_>>(),
    }))
}

fn run(common: &Common, methods: Option<Vec<Method>>) -> Result<serde_json::Value> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.base_seed = seed;
    }
    if let Some(m) = methods {
        cfg.methods = m;
    }
    cfg.validate()?;
    let run = run_experiment(&cfg)?;
    run.write(&common.out, &cfg)?;
    Ok(json!({
        "out": path_str(&common.out),
        "config_hash": run.config_hash,
        "records": run.inputs.records.len(),
        "cell_errors": run.inputs.errors.len(),
    }))
}

fn report(common: &Common) -> Result<serde_json::Value> {
    let dir = &common.out;
    let stored = dir.join(CONFIG_FILE);
    let cfg = match (&common.config, stored.exists()) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, true) => ExperimentConfig::load(&stored)?,
        (None, false) => ExperimentConfig::default(),
    };
    let inputs = if dir.join(REPORT_FILE).exists() {
        load_and_check(dir)?.1
    } else {
        ReportInputs::load(dir)?
    };
    let report = build_report(&cfg.hash(), &cfg, &inputs)?;
    write_report(dir, &report)?;
    Ok(json!({
        "report": path_str(&dir.join(REPORT_FILE)),
        "summary_rows": report.summary.len(),
        "cell_errors": report.errors.len(),
    }))
}

fn dispatch(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Simulate(c) => simulate(&c),
        Command::Pretrain { common, manifest } => pretrain(&common, manifest.as_deref()),
        Command::Map {
            common,
            checkpoint,
            manifest,
            enrollment,
            fold,
            random,
        } => map(&common, &checkpoint, manifest.as_deref(), enrollment, fold, random),
        Command::Evaluate {
            common,
            checkpoint,
            mapping,
            manifest,
            fold,
            method,
        } => evaluate(&common, &checkpoint, &mapping, manifest.as_deref(), fold, method),
        Command::Sweep(c) => run(&c, Some(vec![Method::PtMapped])),
        Command::Report(c) => report(&c),
        Command::Run(c) => run(&c, None),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
