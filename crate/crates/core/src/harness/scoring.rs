//! Individual and aggregate CCC of a method's predictions.

use std::collections::BTreeMap;

use crate::corpus::{aggregate_labels, Dataset};
use crate::error::{Error, Result};
use crate::mapper::MethodPredictions;
use crate::metrics::ccc;

/// CCC of each annotator with at least two scored samples: `id -> [act, val]`.
pub fn per_annotator_ccc(predictions: &MethodPredictions, test: &Dataset) -> Result<BTreeMap<String, [f64; 2]>> {
    let mut by: BTreeMap<&str, ([Vec<f64>; 2], [Vec<f64>; 2])> = BTreeMap::new();
    for a in test.annotations() {
        let p = predictions.individual(&a.sample_id, &a.annotator_id).ok_or_else(|| {
            Error::InvalidInput(format!(
                "{} has no prediction for ({}, {})",
                predictions.method, a.sample_id, a.annotator_id
            ))
        })?;
        let slot = by.entry(&a.annotator_id).or_default();
        for d in 0..2 {
            slot.0[d].push(p[d]);
        }
        slot.1[0].push(a.activation);
        slot.1[1].push(a.valence);
    }
    let mut out = BTreeMap::new();
    for (id, (pred, truth)) in by {
        if pred[0].len() < 2 {
            continue;
        }
        out.insert(id.to_owned(), [ccc(&pred[0], &truth[0])?, ccc(&pred[1], &truth[1])?]);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndividualScore {
    /// [act, val]
    pub ccc: [f64; 2],
    pub n_annotators: usize,
}

/// Unweighted mean of per-annotator CCC over annotators with at least two
/// scored samples.
pub fn metric_ccc_ind(predictions: &MethodPredictions, test: &Dataset) -> Result<IndividualScore> {
    let per = per_annotator_ccc(predictions, test)?;
    if per.is_empty() {
        return Err(Error::InvalidInput(
            "no annotator has at least 2 scored samples".into(),
        ));
    }
    let n = per.len() as f64;
    let ccc = [0, 1].map(|d| per.values().map(|c| c[d]).sum::<f64>() / n);
    Ok(IndividualScore {
        ccc,
        n_annotators: per.len(),
    })
}

/// CCC between per-sample aggregate truth and aggregate predictions, in
/// sample order.
pub fn metric_ccc_agg(predictions: &MethodPredictions, test: &Dataset) -> Result<[f64; 2]> {
    let truth = aggregate_labels(test);
    if truth.len() < 2 {
        return Err(Error::InvalidInput("aggregate CCC needs at least 2 test samples".into()));
    }
    let mut pred = [Vec::with_capacity(truth.len()), Vec::with_capacity(truth.len())];
    for t in &truth {
        let p = predictions.aggregate.get(&t.sample_id).ok_or_else(|| {
            Error::InvalidInput(format!("{} has no aggregate prediction for {}", predictions.method, t.sample_id))
        })?;
        pred[0].push(p[0]);
        pred[1].push(p[1]);
    }
    let act: Vec<f64> = truth.iter().map(|t| t.activation_mean).collect();
    let val: Vec<f64> = truth.iter().map(|t| t.valence_mean).collect();
    Ok([ccc(&pred[0], &act)?, ccc(&pred[1], &val)?])
}
