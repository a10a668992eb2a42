//! Training regimes: aggregate pre-training, annotator-head training and
//! aggregate finetuning, all with CCC loss and Adam.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss_aggregate, batch_loss_individual, AggregateItem, IndividualItem};
use super::model::ModelParams;
use super::optim::Adam;
use crate::corpus::{aggregate_labels, Dataset};
use crate::error::{Error, Result};
use crate::metrics::ccc_unchecked;
use crate::seeding::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub rng_seed: u64,
    pub annotators_per_batch: usize,
    pub samples_per_annotator_in_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            rng_seed: 0,
            annotators_per_batch: 8,
            samples_per_annotator_in_batch: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience cannot exceed max_epochs".into()));
        }
        if self.annotators_per_batch == 0 || self.samples_per_annotator_in_batch < 2 {
            return Err(Error::Config(
                "need annotators_per_batch >= 1 and samples_per_annotator_in_batch >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss; `None` for the pre-training evaluation (epoch 0).
    pub train_loss: Option<f64>,
    pub validation: Option<f64>,
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (0 = the input parameters).
    pub best_epoch: usize,
    pub best_validation: Option<f64>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn total_updates(&self) -> usize {
        self.epochs.iter().map(|e| e.updates).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    pub history: TrainHistory,
}

/// Patience-based stopping on a score to maximize. The score before any
/// training counts as epoch 0; training stops once `patience + 1`
/// consecutive epochs fail to improve on the best.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, initial: f64) -> Self {
        Self {
            patience,
            best: initial,
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Record an epoch's score; returns (improved, should_stop).
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.since_best = 0;
            (true, false)
        } else {
            self.since_best += 1;
            (false, self.since_best > self.patience)
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Aggregate-label items for `sample_ids` (all samples when `None`).
pub fn aggregate_items<'a>(dataset: &'a Dataset, sample_ids: Option<&BTreeSet<String>>) -> Vec<AggregateItem<'a>> {
    aggregate_labels(dataset)
        .into_iter()
        .filter(|l| sample_ids.is_none_or(|ids| ids.contains(&l.sample_id)))
        .map(|l| AggregateItem {
            features: &dataset.sample(&l.sample_id).expect("aggregate of known sample").features,
            target: [l.activation_mean, l.valence_mean],
        })
        .collect()
}

/// Per-annotation items restricted to annotators that own a head in
/// `params` and to `sample_ids` (all samples when `None`).
pub fn individual_items<'a>(
    dataset: &'a Dataset,
    params: &ModelParams,
    sample_ids: Option<&BTreeSet<String>>,
) -> Vec<IndividualItem<'a>> {
    dataset
        .annotations()
        .iter()
        .filter(|a| sample_ids.is_none_or(|ids| ids.contains(&a.sample_id)))
        .filter_map(|a| {
            let head = params.head_index(&a.annotator_id)?;
            Some(IndividualItem {
                features: &dataset.sample(&a.sample_id)?.features,
                head,
                target: [a.activation, a.valence],
            })
        })
        .collect()
}

/// Mean over dimensions of the aggregate-head CCC.
pub fn aggregate_score(params: &ModelParams, items: &[AggregateItem<'_>]) -> Result<f64> {
    if items.len() < 2 {
        return Err(Error::InvalidInput("aggregate score needs at least 2 samples".into()));
    }
    let mut preds = [Vec::with_capacity(items.len()), Vec::with_capacity(items.len())];
    for item in items {
        let e = params.embed(item.features)?;
        for d in 0..2 {
            preds[d].push(params.aggregate[d].apply(&e.dims[d]));
        }
    }
    let score = (0..2)
        .map(|d| {
            let t: Vec<f64> = items.iter().map(|i| i.target[d]).collect();
            ccc_unchecked(&preds[d], &t)
        })
        .sum::<f64>()
        / 2.0;
    Ok(score)
}

/// Per-annotator CCC of each head on its own annotator's items, for
/// annotators with at least two items: `head -> [act, val]`.
pub fn per_head_ccc(params: &ModelParams, items: &[IndividualItem<'_>]) -> Result<BTreeMap<usize, [f64; 2]>> {
    let mut groups: BTreeMap<usize, Vec<&IndividualItem>> = BTreeMap::new();
    for item in items {
        groups.entry(item.head).or_default().push(item);
    }
    let mut out = BTreeMap::new();
    for (head, members) in groups {
        if members.len() < 2 {
            continue;
        }
        let mut preds = [Vec::new(), Vec::new()];
        for m in &members {
            let e = params.embed(m.features)?;
            for d in 0..2 {
                preds[d].push(params.heads[d][head].apply(&e.dims[d]));
            }
        }
        let ccc = [0, 1].map(|d| {
            let t: Vec<f64> = members.iter().map(|m| m.target[d]).collect();
            ccc_unchecked(&preds[d], &t)
        });
        out.insert(head, ccc);
    }
    Ok(out)
}

/// Unweighted mean of per-annotator CCC across annotators and dimensions.
pub fn individual_score(params: &ModelParams, items: &[IndividualItem<'_>]) -> Result<f64> {
    let per = per_head_ccc(params, items)?;
    if per.is_empty() {
        return Err(Error::InvalidInput(
            "individual score needs an annotator with at least 2 items".into(),
        ));
    }
    Ok(per.values().map(|c| c[0] + c[1]).sum::<f64>() / (2 * per.len()) as f64)
}

fn aggregate_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Heads with fewer than two items cannot form a CCC term and are left out.
fn eligible_groups(items: &[IndividualItem<'_>]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        groups.entry(item.head).or_default().push(i);
    }
    let before = groups.len();
    groups.retain(|_, m| m.len() >= 2);
    if groups.len() < before {
        log::info!(
            "excluding {} annotators with fewer than 2 training annotations",
            before - groups.len()
        );
    }
    groups
}

/// Each annotator's items are shuffled and cut into chunks of
/// `per_annotator` (a trailing singleton joins the previous chunk); chunks
/// are shuffled and packed `annotators_per_batch` at a time. Every eligible
/// item appears exactly once per epoch.
fn individual_batches(
    groups: &BTreeMap<usize, Vec<usize>>,
    annotators_per_batch: usize,
    per_annotator: usize,
    rng: &mut Rng,
) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    for members in groups.values() {
        let mut m = members.clone();
        m.shuffle(rng);
        let mut own: Vec<Vec<usize>> = m.chunks(per_annotator).map(<[usize]>::to_vec).collect();
        if own.len() > 1 && own.last().is_some_and(|c| c.len() < 2) {
            let tail = own.pop().unwrap();
            own.last_mut().unwrap().extend(tail);
        }
        chunks.extend(own);
    }
    chunks.shuffle(rng);
    chunks
        .chunks(annotators_per_batch)
        .map(|group| group.concat())
        .collect()
}

fn check_finite(epoch: usize, loss: f64, params: &ModelParams) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            detail: format!("batch loss {loss}"),
        });
    }
    if !params.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            detail: "non-finite parameter after update".into(),
        });
    }
    Ok(())
}

struct AggregateRun<'a, 'b> {
    items: &'a [AggregateItem<'b>],
    cfg: &'a TrainConfig,
    adam: Adam,
    shuffle_rng: Rng,
    dropout_rng: Rng,
}

impl AggregateRun<'_, '_> {
    fn epoch(&mut self, params: &mut ModelParams, epoch: usize) -> Result<(f64, usize)> {
        let batches = aggregate_batches(self.items.len(), self.cfg.batch_size, &mut self.shuffle_rng);
        let mut total = 0.0;
        for b in &batches {
            let batch: Vec<AggregateItem> = b.iter().map(|&i| self.items[i]).collect();
            let out = batch_loss_aggregate(params, &batch, Some(&mut self.dropout_rng))?;
            self.adam.step(params, &out.grads);
            check_finite(epoch, out.loss, params)?;
            total += out.loss;
        }
        Ok((total / batches.len() as f64, batches.len()))
    }
}

fn aggregate_run<'a, 'b>(params: &ModelParams, items: &'a [AggregateItem<'b>], cfg: &'a TrainConfig) -> Result<AggregateRun<'a, 'b>> {
    cfg.validate()?;
    if items.len() < 2 {
        return Err(Error::InvalidInput("aggregate training needs at least 2 samples".into()));
    }
    Ok(AggregateRun {
        items,
        cfg,
        adam: Adam::new(params, cfg.learning_rate),
        shuffle_rng: seeding::rng(cfg.rng_seed, &[seeding::TAG_SHUFFLE]),
        dropout_rng: seeding::rng(cfg.rng_seed, &[seeding::TAG_DROPOUT]),
    })
}

/// Fixed number of aggregate epochs, no validation.
pub fn train_aggregate_epochs(
    params: &ModelParams,
    train: &[AggregateItem<'_>],
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<Trained> {
    let mut run = aggregate_run(params, train, cfg)?;
    let mut p = params.clone();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let (loss, updates) = run.epoch(&mut p, epoch)?;
        records.push(EpochRecord {
            epoch,
            train_loss: Some(loss),
            validation: None,
            updates,
        });
    }
    Ok(Trained {
        params: p,
        history: TrainHistory {
            epochs: records,
            best_epoch: epochs,
            best_validation: None,
            stopped_early: false,
        },
    })
}

/// Aggregate training with early stopping on validation CCC (mean of both
/// dimensions); the best-scoring parameters are returned.
pub fn train_aggregate(
    params: &ModelParams,
    train: &[AggregateItem<'_>],
    validation: &[AggregateItem<'_>],
    cfg: &TrainConfig,
) -> Result<Trained> {
    let mut run = aggregate_run(params, train, cfg)?;
    let mut p = params.clone();
    let initial = aggregate_score(&p, validation)?;
    let mut stopper = EarlyStopping::new(cfg.patience, initial);
    let mut best = p.clone();
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        validation: Some(initial),
        updates: 0,
    }];
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let (loss, updates) = run.epoch(&mut p, epoch)?;
        let score = aggregate_score(&p, validation)?;
        records.push(EpochRecord {
            epoch,
            train_loss: Some(loss),
            validation: Some(score),
            updates,
        });
        let (improved, stop) = stopper.observe(epoch, score);
        if improved {
            best = p.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_score) = stopper.best();
    log::debug!("aggregate training: best epoch {best_epoch} score {best_score:.4}");
    Ok(Trained {
        params: best,
        history: TrainHistory {
            epochs: records,
            best_epoch,
            best_validation: Some(best_score),
            stopped_early,
        },
    })
}

/// Annotator-head training with early stopping on mean per-annotator
/// validation CCC. Heads of annotators without at least two training items
/// never receive an update.
pub fn train_individual(
    params: &ModelParams,
    train: &[IndividualItem<'_>],
    validation: &[IndividualItem<'_>],
    cfg: &TrainConfig,
) -> Result<Trained> {
    cfg.validate()?;
    let groups = eligible_groups(train);
    if groups.is_empty() {
        return Err(Error::InvalidInput(
            "no annotator has at least 2 training annotations".into(),
        ));
    }
    let mut shuffle_rng = seeding::rng(cfg.rng_seed, &[seeding::TAG_SHUFFLE]);
    let mut dropout_rng = seeding::rng(cfg.rng_seed, &[seeding::TAG_DROPOUT]);
    let mut adam = Adam::new(params, cfg.learning_rate);
    let mut p = params.clone();
    let initial = individual_score(&p, validation)?;
    let mut stopper = EarlyStopping::new(cfg.patience, initial);
    let mut best = p.clone();
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        validation: Some(initial),
        updates: 0,
    }];
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let batches = individual_batches(
            &groups,
            cfg.annotators_per_batch,
            cfg.samples_per_annotator_in_batch,
            &mut shuffle_rng,
        );
        let mut total = 0.0;
        for b in &batches {
            let batch: Vec<IndividualItem> = b.iter().map(|&i| train[i]).collect();
            let out = batch_loss_individual(&p, &batch, Some(&mut dropout_rng))?;
            adam.step(&mut p, &out.grads);
            check_finite(epoch, out.loss, &p)?;
            total += out.loss;
        }
        let score = individual_score(&p, validation)?;
        records.push(EpochRecord {
            epoch,
            train_loss: Some(total / batches.len() as f64),
            validation: Some(score),
            updates: batches.len(),
        });
        let (improved, stop) = stopper.observe(epoch, score);
        if improved {
            best = p.clone();
        }
        if stop {
            stopped_early = true;
            break;
        }
    }
    let (best_epoch, best_score) = stopper.best();
    log::debug!("individual training: best epoch {best_epoch} score {best_score:.4}");
    Ok(Trained {
        params: best,
        history: TrainHistory {
            epochs: records,
            best_epoch,
            best_validation: Some(best_score),
            stopped_early,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    OneEpoch,
    UntilEarlyStop,
}

/// Finetune the aggregate path on target data. `UntilEarlyStop` uses
/// `cfg.patience` and requires validation items.
pub fn finetune_aggregate(
    params: &ModelParams,
    train: &[AggregateItem<'_>],
    validation: Option<&[AggregateItem<'_>]>,
    mode: FinetuneMode,
    cfg: &TrainConfig,
) -> Result<Trained> {
    match mode {
        FinetuneMode::OneEpoch => train_aggregate_epochs(params, train, cfg, 1),
        FinetuneMode::UntilEarlyStop => {
            let validation = validation
                .filter(|v| v.len() >= 2)
                .ok_or_else(|| Error::InvalidInput("full finetuning needs a validation partition".into()))?;
            train_aggregate(params, train, validation, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_patience_semantics() {
        // Monotonically worsening: stops after patience + 1 epochs, best is epoch 0.
        let mut s = EarlyStopping::new(10, 0.5);
        let mut stopped_at = None;
        for epoch in 1..=100 {
            let (_, stop) = s.observe(epoch, 0.5 - 0.01 * epoch as f64);
            if stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped_at, Some(11));
        assert_eq!(s.best().0, 0);

        let mut s = EarlyStopping::new(0, 0.1);
        assert_eq!(s.observe(1, 0.2), (true, false));
        assert_eq!(s.observe(2, 0.2), (false, true));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 200,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            samples_per_annotator_in_batch: 1,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn individual_batches_cover_each_item_once() {
        let mut groups = BTreeMap::new();
        groups.insert(0, (0..9).collect::<Vec<_>>());
        groups.insert(1, (9..12).collect());
        groups.insert(2, (12..14).collect());
        let mut rng = seeding::rng(1, &[]);
        let batches = individual_batches(&groups, 2, 4, &mut rng);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..14).collect::<Vec<_>>());
        let owner = |i: usize| if i < 9 { 0 } else if i < 12 { 1 } else { 2 };
        for b in &batches {
            let mut counts = BTreeMap::new();
            for &i in b {
                *counts.entry(owner(i)).or_insert(0) += 1;
            }
            assert!(counts.values().all(|&c| c >= 2));
        }
    }

    #[test]
    fn aggregate_batches_never_leave_singletons() {
        let mut rng = seeding::rng(1, &[]);
        let b = aggregate_batches(33, 32, &mut rng);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 33);
        let b = aggregate_batches(70, 32, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
    }
}
